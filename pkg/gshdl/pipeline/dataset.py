"""Labeled image datasets: manifest parsing, Pillow IO and validation.

A manifest is a text file with one ``image_path<TAB>mask_path`` record per
line; relative paths are resolved against the manifest's directory. The class
map is a separate file with ``index<TAB>name<TAB>#RRGGBB`` lines. A class named
``void`` marks the void label, which is excluded from training and metrics
and is stored as -1 in label grids.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from ..errors import DataError, IngestionError

logger = logging.getLogger("gshdl.pipeline")

VOID = -1
VOID_NAMES = ("void",)


class ClassInfo(NamedTuple):
    """Display name and RGB colour of one label."""

    name: str
    color: Tuple[int, int, int]


@dataclass
class DatasetManifest:
    """Records plus class map; ``void_label`` is the file-level void index, if any."""

    records: List[Tuple[Path, Path]]
    class_map: Dict[int, ClassInfo]
    void_label: Optional[int] = None
    void_color: Optional[Tuple[int, int, int]] = None

    @property
    def num_classes(self) -> int:
        return len(self.class_map)


@dataclass
class Dataset:
    """In-memory images ``(3, H, W)`` in ``[0, 1]`` and label grids (-1 = void)."""

    images: List[np.ndarray]
    labels: List[np.ndarray]
    class_map: Dict[int, ClassInfo]
    names: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} label grids")
        if not self.names:
            self.names = [f"image_{i:04d}" for i in range(len(self.images))]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_map)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = [int(i) for i in indices]
        return Dataset(
            [self.images[i] for i in indices],
            [self.labels[i] for i in indices],
            self.class_map,
            [self.names[i] for i in indices],
        )

    def dominant_labels(self) -> np.ndarray:
        """Most frequent non-void label of every image (-1 for all-void images)."""
        dominant = []
        for labels in self.labels:
            valid = labels[labels >= 0]
            counts = np.bincount(valid, minlength=self.num_classes) if valid.size else None
            dominant.append(int(np.argmax(counts)) if counts is not None else VOID)
        return np.array(dominant, dtype=np.int64)

    def fingerprint(self) -> str:
        """SHA-256 prefix over every image and label grid."""
        digest = hashlib.sha256()
        for image, labels in zip(self.images, self.labels):
            digest.update(np.ascontiguousarray(image, dtype=np.float64).tobytes())
            digest.update(np.ascontiguousarray(labels, dtype=np.int64).tobytes())
        return digest.hexdigest()[:16]


def parse_color(text: str) -> Tuple[int, int, int]:
    text = text.strip().lstrip("#")
    if len(text) != 6:
        raise ValueError(f"expected #RRGGBB, got {text!r}")
    return tuple(int(text[i:i + 2], 16) for i in (0, 2, 4))


def format_color(color: Tuple[int, int, int]) -> str:
    return "#" + "".join(f"{c:02X}" for c in color)


def read_class_map(path: Union[str, Path]) -> Tuple[Dict[int, ClassInfo], Optional[int], Optional[Tuple[int, int, int]]]:
    """Parse a class-map file.

    Returns:
        Tuple: ``{index: ClassInfo}`` for the non-void classes (indices must
        be ``0..C-1``), plus the void index and colour if declared

    Raises:
        IngestionError: Unreadable file, malformed line or non-contiguous indices
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IngestionError(f"cannot read class map: {e}", record=str(path)) from e
    class_map: Dict[int, ClassInfo] = {}
    void_label = void_color = None
    for number, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        try:
            index, name, color = int(parts[0]), parts[1].strip(), parse_color(parts[2])
        except (IndexError, ValueError) as e:
            raise IngestionError(f"malformed class-map line: {e}", record=f"{path}:{number}") from e
        if name.lower() in VOID_NAMES:
            void_label, void_color = index, color
        else:
            class_map[index] = ClassInfo(name, color)
    if sorted(class_map) != list(range(len(class_map))):
        raise IngestionError(f"class indices must be 0..C-1, got {sorted(class_map)}", record=str(path))
    return class_map, void_label, void_color


def read_manifest(manifest_path: Union[str, Path], class_map_path: Optional[Union[str, Path]] = None) -> DatasetManifest:
    """Parse a manifest; the class map defaults to ``classes.tsv`` next to it."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    try:
        lines = manifest_path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IngestionError(f"cannot read manifest: {e}", record=str(manifest_path)) from e
    records = []
    for number, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise IngestionError("expected image_path<TAB>mask_path", record=f"{manifest_path}:{number}")
        records.append(tuple(root / p.strip() for p in parts))
    class_map_path = Path(class_map_path or root / "classes.tsv")
    if not records and not class_map_path.exists():
        return DatasetManifest(records, {})
    class_map, void_label, void_color = read_class_map(class_map_path)
    return DatasetManifest(records, class_map, void_label, void_color)


def read_image(path: Union[str, Path]) -> np.ndarray:
    """RGB image as ``(3, H, W)`` float64 in ``[0, 1]``."""
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    return np.ascontiguousarray(rgb.transpose(2, 0, 1) / 255.0)


def read_mask(path: Union[str, Path], manifest: DatasetManifest) -> np.ndarray:
    """Label grid from an indexed/greyscale mask, or an RGB mask via the class colours."""
    with Image.open(path) as img:
        if img.mode in ("RGB", "RGBA"):
            rgb = np.asarray(img.convert("RGB"), dtype=np.int64)
            codes = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
            lookup = {(r << 16) | (g << 8) | b: i for i, (_, (r, g, b)) in manifest.class_map.items()}
            labels = np.full(codes.shape, -2, dtype=np.int64)
            for code, index in lookup.items():
                labels[codes == code] = index
            if manifest.void_color is not None:
                r, g, b = manifest.void_color
                labels[codes == ((r << 16) | (g << 8) | b)] = VOID
            return labels
        raw = np.asarray(img, dtype=np.int64)
    labels = raw.copy()
    if manifest.void_label is not None:
        labels[raw == manifest.void_label] = VOID
    return labels


def load_dataset(manifest_path: Union[str, Path], class_map_path: Optional[Union[str, Path]] = None) -> Dataset:
    """Load and validate every record of a manifest.

    Raises:
        IngestionError: Missing file, image/mask size mismatch or unknown label,
            naming the offending record
    """
    manifest = read_manifest(manifest_path, class_map_path)
    images, labels, names = [], [], []
    for image_path, mask_path in manifest.records:
        record = f"{image_path.name} | {mask_path.name}"
        for path in (image_path, mask_path):
            if not path.is_file():
                raise IngestionError(f"missing file {path}", record=record)
        try:
            image = read_image(image_path)
            mask = read_mask(mask_path, manifest)
        except OSError as e:
            raise IngestionError(f"unreadable image: {e}", record=record) from e
        if image.shape[1:] != mask.shape:
            raise IngestionError(
                f"image is {image.shape[1]}x{image.shape[2]} but mask is {mask.shape[0]}x{mask.shape[1]}",
                record=record,
            )
        unknown = np.setdiff1d(np.unique(mask), [VOID, *manifest.class_map])
        if unknown.size:
            raise IngestionError(f"unknown label value(s) {unknown.tolist()}", record=record)
        images.append(image)
        labels.append(mask)
        names.append(image_path.stem)
    logger.info(f"Loaded {len(images)} images with {manifest.num_classes} classes from {manifest_path}")
    return Dataset(images, labels, manifest.class_map, names)


def save_dataset(dataset: Dataset, directory: Union[str, Path]) -> Path:
    """Write PNG images, palette masks, ``classes.tsv`` and ``manifest.tsv``.

    Void pixels are written with index 255 and declared as ``void`` in the class map.
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    void_index = 255
    palette = []
    for index in range(256):
        info = dataset.class_map.get(index)
        palette.extend(info.color if info else (0, 0, 0))

    lines = []
    for name, image, labels in zip(dataset.names, dataset.images, dataset.labels):
        pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(pixels).save(directory / "images" / f"{name}.png")
        mask = Image.fromarray(np.where(labels >= 0, labels, void_index).astype(np.uint8))
        mask.putpalette(palette)
        mask.save(directory / "masks" / f"{name}.png")
        lines.append(f"images/{name}.png\tmasks/{name}.png")

    class_lines = [f"{i}\t{info.name}\t{format_color(info.color)}" for i, info in sorted(dataset.class_map.items())]
    class_lines.append(f"{void_index}\tvoid\t#000000")
    (directory / "classes.tsv").write_text("\n".join(class_lines) + "\n", encoding="utf-8")
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    logger.info(f"Wrote {len(dataset)} images to {directory}")
    return manifest
