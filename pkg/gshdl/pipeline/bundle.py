"""Trained end-to-end models and their container files.

A bundle file is a container whose first chunk (``META``) describes the
scattering front-end, the CRF feature stages and the training provenance;
it is followed by one ``PRIR`` chunk per prior set, one ``CRBM`` chunk per
RBM layer and a single ``CRFW`` chunk.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np

from ..container import FORMAT_VERSION, Chunk, read_container, write_container
from ..conv_rbm import LAYER_TAG, RbmLayer, layer_chunk, layer_from_chunk
from ..crf import CrfWeights, InferenceOptions, Potentials, build_potentials, model_chunk, model_from_chunk
from ..crf import segment_many as crf_segment_many
from ..crf.training import MODEL_TAG
from ..errors import ConfigError, ContainerError
from ..pca_prior import PRIOR_TAG, PriorFilterSet, prior_chunk, priors_from_chunk
from ..scatternet import ComplexFilterBank, ScatterConfig, build_filter_bank, scatter
from .dataset import ClassInfo

logger = logging.getLogger("gshdl.pipeline")

META_TAG = "META"

T = TypeVar("T")
R = TypeVar("R")


def map_images(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """Apply ``fn`` to every item, on a thread pool when ``workers > 1``; keeps input order."""
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def stage_name(depth: int) -> str:
    """``HC`` for depth 0, ``L3``, ``L4``, ... for the RBM layers."""
    return "HC" if depth == 0 else f"L{depth + 2}"


def stage_depth(name: str) -> int:
    """Inverse of :func:`stage_name`."""
    if name == "HC":
        return 0
    if name.startswith("L") and name[1:].isdigit() and int(name[1:]) >= 3:
        return int(name[1:]) - 2
    raise ConfigError(f"unknown feature stage {name!r}")


def forward_stages(hc: np.ndarray, layers: Sequence[RbmLayer], depth: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Feature volumes of every stage up to ``depth`` (default: all layers) for one image."""
    depth = len(layers) if depth is None else depth
    if depth > len(layers):
        raise ConfigError(f"stage {stage_name(depth)} needs {depth} RBM layers, only {len(layers)} available")
    stages = {"HC": hc}
    volume = hc
    for i, layer in enumerate(layers[:depth]):
        volume = layer.encode(volume)
        stages[stage_name(i + 1)] = volume
    return stages


def stack_stages(stages: Dict[str, np.ndarray], names: Sequence[str]) -> np.ndarray:
    """Channel-wise concatenation of the named stages."""
    return np.concatenate([stages[name] for name in names], axis=0)


def standardize(volume: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return (volume - mean[:, None, None]) / scale[:, None, None]


@dataclass
class ModelBundle:
    """Everything needed to segment a new image.

    ``crf_mean``/``crf_scale`` standardize the stacked ``feature_layers``
    volume before it reaches the CRF. ``priors`` are kept for provenance
    only; they are not needed for inference.
    """

    scatter_config: ScatterConfig
    layers: List[RbmLayer]
    crf: CrfWeights
    inference: InferenceOptions
    feature_layers: Tuple[str, ...]
    crf_mean: np.ndarray
    crf_scale: np.ndarray
    class_map: Dict[int, ClassInfo]
    priors: List[PriorFilterSet] = field(default_factory=list)
    provenance: Dict[str, Any] = field(default_factory=dict)
    bank_fingerprint: str = ""
    _bank: Optional[ComplexFilterBank] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.feature_layers = tuple(self.feature_layers)
        self.depth = max(stage_depth(name) for name in self.feature_layers)
        if self.depth > len(self.layers):
            raise ConfigError(f"feature stages {self.feature_layers} need {self.depth} RBM layers, "
                              f"bundle has {len(self.layers)}")

    @property
    def num_classes(self) -> int:
        return self.crf.num_labels

    @property
    def bank(self) -> ComplexFilterBank:
        if self._bank is None:
            self._bank = build_filter_bank(self.scatter_config)
            fingerprint = self._bank.fingerprint()
            if not self.bank_fingerprint:
                self.bank_fingerprint = fingerprint
            elif fingerprint != self.bank_fingerprint:
                logger.warning(f"Filter bank fingerprint {fingerprint} differs from the stored "
                               f"{self.bank_fingerprint}; features may not match training")
        return self._bank

    def stage_features(self, image: np.ndarray, depth: Optional[int] = None) -> Dict[str, np.ndarray]:
        """HC and RBM-layer features of one ``(3, H, W)`` image."""
        hc = scatter(image, self.bank, self.scatter_config).channels()
        return forward_stages(hc, self.layers, self.depth if depth is None else depth)

    def crf_features(self, image: np.ndarray) -> np.ndarray:
        return standardize(stack_stages(self.stage_features(image), self.feature_layers), self.crf_mean, self.crf_scale)

    def potentials(self, image: np.ndarray) -> Potentials:
        return build_potentials(self.crf_features(image), image, self.crf)

    def segment(self, image: np.ndarray) -> np.ndarray:
        """MAP-approximate labeling ``(H, W)`` of one image."""
        return self.segment_many([image])[0]

    def segment_many(self, images: Sequence[np.ndarray], workers: int = 1) -> List[np.ndarray]:
        """Labelings of several images; features are computed on ``workers`` threads."""
        self.bank  # built once, before the worker threads start
        potentials = map_images(self.potentials, images, workers)
        return crf_segment_many(potentials, self.inference)


def _meta_chunk(bundle: ModelBundle) -> Chunk:
    config = bundle.scatter_config
    fingerprint = bundle.bank.fingerprint()
    return Chunk(
        tag=META_TAG,
        header={
            "format_version": FORMAT_VERSION,
            "scatter": {
                "num_scales": config.num_scales,
                "orientations": list(config.orientations),
                "log_k_finest": float(config.log_k_finest),
                "dual_resolution": bool(config.dual_resolution),
            },
            "bank_fingerprint": bundle.bank_fingerprint or fingerprint,
            "feature_layers": list(bundle.feature_layers),
            "class_map": [[i, info.name, [int(c) for c in info.color]] for i, info in sorted(bundle.class_map.items())],
            "num_priors": len(bundle.priors),
            "num_layers": len(bundle.layers),
            "provenance": bundle.provenance,
        },
        arrays={"crf_mean": bundle.crf_mean, "crf_scale": bundle.crf_scale},
    )


def bundle_chunks(bundle: ModelBundle) -> List[Chunk]:
    chunks = [_meta_chunk(bundle)]
    chunks += [prior_chunk(p, name=stage_name(i + 1)) for i, p in enumerate(bundle.priors)]
    chunks += [layer_chunk(layer, name=stage_name(i + 1)) for i, layer in enumerate(bundle.layers)]
    chunks.append(model_chunk(bundle.crf, bundle.inference))
    return chunks


def bundle_from_chunks(chunks: Sequence[Chunk]) -> ModelBundle:
    """Rebuild a bundle from decoded chunks.

    Raises:
        ContainerError: Missing ``META`` or ``CRFW`` chunk, or chunk counts
            that disagree with the metadata
    """
    if not chunks or chunks[0].tag != META_TAG:
        raise ContainerError(f"model bundle must start with a {META_TAG} chunk")
    meta = chunks[0]
    header = meta.header
    priors = [priors_from_chunk(c) for c in chunks if c.tag == PRIOR_TAG]
    layers = [layer_from_chunk(c) for c in chunks if c.tag == LAYER_TAG]
    models = [c for c in chunks if c.tag == MODEL_TAG]
    if len(models) != 1:
        raise ContainerError(f"model bundle needs exactly one {MODEL_TAG} chunk, found {len(models)}")
    if len(priors) != header["num_priors"] or len(layers) != header["num_layers"]:
        raise ContainerError(
            f"bundle declares {header['num_priors']} prior sets and {header['num_layers']} layers, "
            f"found {len(priors)} and {len(layers)}"
        )
    weights, inference = model_from_chunk(models[0])
    scatter_header = header["scatter"]
    return ModelBundle(
        scatter_config=ScatterConfig(
            num_scales=scatter_header["num_scales"],
            orientations=tuple(scatter_header["orientations"]),
            log_k_finest=scatter_header["log_k_finest"],
            dual_resolution=scatter_header["dual_resolution"],
        ),
        layers=layers,
        crf=weights,
        inference=inference,
        feature_layers=tuple(header["feature_layers"]),
        crf_mean=meta.arrays["crf_mean"],
        crf_scale=meta.arrays["crf_scale"],
        class_map={int(i): ClassInfo(name, tuple(color)) for i, name, color in header["class_map"]},
        priors=priors,
        provenance=header["provenance"],
        bank_fingerprint=header["bank_fingerprint"],
    )


def save_bundle(bundle: ModelBundle, path: Union[str, Path]) -> None:
    """Write ``bundle`` to ``path``; re-saving a loaded bundle reproduces the file byte for byte."""
    write_container(path, bundle_chunks(bundle))
    logger.info(f"Saved model bundle ({len(bundle.layers)} layers, {bundle.num_classes} classes) to {path}")


def load_bundle(path: Union[str, Path]) -> ModelBundle:
    """Read a bundle written by :func:`save_bundle`.

    Raises:
        BadMagicError, VersionError, ChecksumError, ContainerError: Invalid file;
            nothing is returned on any error
    """
    bundle = bundle_from_chunks(read_container(path))
    logger.info(f"Loaded model bundle from {path} (stages {', '.join(bundle.feature_layers)})")
    return bundle
