"""G-SHDL: generative-supervised hybrid deep learning for semantic segmentation.

A fixed scattering front-end feeds stacked convolutional RBM layers that are
seeded with PCA structural priors; a pixel-grid CRF trained through
tree-reweighted inference produces the final labeling.

Key Components:
- core: Compiled convolution kernel with a scipy fallback
- scatternet, pca_prior, conv_rbm: Unsupervised feature hierarchy
- crf: Supervised grid CRF back-end
- pipeline: Datasets, experiments, model bundles and overlays
- persistence: Experiment-run registry using SQLAlchemy
- cli: Command-line entry point
"""

__version__ = "0.1.0"

# Package metadata
__author__ = "G-SHDL Team"
__email__ = "gshdl@example.com"
__license__ = "MIT"
__url__ = "https://github.com/gshdl/gshdl"

from .core import HAS_CYTHON

if not HAS_CYTHON:
    import logging
    logging.getLogger("gshdl").debug(
        "Compiled kernels not available. Run 'pip install -e .' to build them."
    )

__all__ = ["HAS_CYTHON", "__version__"]
