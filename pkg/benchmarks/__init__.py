"""Benchmarks package for G-SHDL.

This package contains performance benchmarking tools for the pipeline,
measuring the mirror convolution, scattering, CD updates, TRW inference,
the CRF gradient and memory use.

To run all benchmarks:
    python -m benchmarks.benchmark

To run a specific benchmark:
    python -m benchmarks.benchmark --inference
"""

import sys
from pathlib import Path

# Add the parent directory to Python path to ensure gshdl modules can be imported
sys.path.insert(0, str(Path(__file__).parent.parent))

# Available benchmarks
available_benchmarks = [
    'conv',
    'scatter',
    'rbm',
    'inference',
    'crf',
    'memory',
]
