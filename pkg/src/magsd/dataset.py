"""Dataset ingestion: CSV manifests, image/annotation IO, synthetic pseudo-CXR
generation and stratified fold splitting."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
from PIL import Image

from .rng import stream


class DataError(Exception):
    """Bad or missing input data (manifest, images, annotations)."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel coordinates, half-open: [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return max(0, self.x1 - self.x0) * max(0, self.y1 - self.y0)

    def to_mask(self, shape: tuple[int, int]) -> np.ndarray:
        mask = np.zeros(shape, dtype=bool)
        h, w = shape
        mask[max(0, self.y0):min(h, self.y1), max(0, self.x0):min(w, self.x1)] = True
        return mask

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "Box | None":
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if rows.size == 0:
            return None
        return cls(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


@dataclass
class Sample:
    image: np.ndarray
    label: int
    id: str
    annotation: np.ndarray | Box | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 2 or self.image.size == 0:
            raise DataError(f"{self.id}: image must be a nonempty 2-D grid")
        if not np.isfinite(self.image).all() or self.image.min() < 0 or self.image.max() > 1:
            raise DataError(f"{self.id}: pixel values must lie in [0, 1]")
        if isinstance(self.annotation, np.ndarray):
            self.annotation = self.annotation.astype(bool)
            if self.annotation.shape != self.image.shape:
                raise DataError(f"{self.id}: mask shape {self.annotation.shape} != image shape")

    def annotation_mask(self) -> np.ndarray | None:
        if self.annotation is None:
            return None
        if isinstance(self.annotation, Box):
            return self.annotation.to_mask(self.image.shape)
        return self.annotation

    def annotation_box(self) -> Box | None:
        if self.annotation is None:
            return None
        if isinstance(self.annotation, Box):
            return self.annotation
        return Box.from_mask(self.annotation)


@dataclass
class ManifestEntry:
    path: str
    label: str
    annotation_path: str | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    classes: list[str]
    root: Path = field(default_factory=Path)

    def label_index(self, name: str) -> int:
        return self.classes.index(name)


def load_manifest(path: str | Path, strict: bool = True) -> Manifest:
    """Parse a ``path,label[,annotation_path]`` CSV.

    Paths are resolved relative to the manifest's directory. Classes are
    ordered by first appearance. With ``strict`` every referenced file must
    exist.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    classes: list[str] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["path", "label"]:
            raise DataError(f"{path}: header must start with 'path,label'")
        has_ann = len(header) >= 3 and header[2].strip() == "annotation_path"
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2 or len(row) > (3 if has_ann else 2) or not row[0].strip() or not row[1].strip():
                raise DataError(f"{path}:{lineno}: malformed row {row!r}")
            rel, label = row[0].strip(), row[1].strip()
            ann = row[2].strip() if has_ann and len(row) > 2 and row[2].strip() else None
            if rel in seen:
                raise DataError(f"{path}:{lineno}: duplicate path {rel!r}")
            seen.add(rel)
            if strict:
                if not (root / rel).is_file():
                    raise DataError(f"{path}:{lineno}: missing image file {rel!r}")
                if ann is not None and not (root / ann).is_file():
                    raise DataError(f"{path}:{lineno}: missing annotation file {ann!r}")
            if label not in classes:
                classes.append(label)
            entries.append(ManifestEntry(rel, label, ann))
    if not entries:
        raise DataError(f"{path}: empty manifest")
    return Manifest(entries, classes, root)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    has_ann = any(e.annotation_path for e in manifest.entries)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "annotation_path"] if has_ann else ["path", "label"])
        for e in manifest.entries:
            row = [e.path, e.label]
            if has_ann:
                row.append(e.annotation_path or "")
            writer.writerow(row)


def load_image(path: str | Path) -> np.ndarray:
    """Read a grayscale PNG/PGM as float32 in [0, 1] (divided by the dtype's max)."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "I", "I;16", "I;16B", "I;16L"):
                im = im.convert("L")
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype in (np.uint16, np.int32, np.dtype(">u2"), np.dtype("<u2")):
        scale = 65535.0
    else:
        raise DataError(f"{path}: unsupported pixel type {arr.dtype}")
    return np.clip(arr.astype(np.float64) / scale, 0.0, 1.0).astype(np.float32)


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a [0, 1] float grid as 8-bit grayscale PNG."""
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_annotation(path: str | Path, shape: tuple[int, int]) -> np.ndarray | Box:
    path = Path(path)
    if path.suffix.lower() == ".json":
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
            return Box(int(d["x0"]), int(d["y0"]), int(d["x1"]), int(d["y1"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"bad box annotation {path}: {exc}") from exc
    mask = load_image(path) > 0
    if mask.shape != shape:
        raise DataError(f"{path}: mask shape {mask.shape} does not match image {shape}")
    return mask


def load_samples(manifest: Manifest) -> list[Sample]:
    samples = []
    for e in manifest.entries:
        image = load_image(manifest.root / e.path)
        ann = load_annotation(manifest.root / e.annotation_path, image.shape) if e.annotation_path else None
        samples.append(Sample(image, manifest.label_index(e.label), e.path, ann))
    return samples


# ---------------------------------------------------------------------------
# synthetic pseudo-CXR data


@dataclass
class SynthSpec:
    classes: int = 3
    per_class: int = 100
    size: int = 64
    seed: int = 0
    marker: bool = True

    def validate(self) -> None:
        if self.classes < 2:
            raise ValueError("synthetic spec needs at least 2 classes")
        if self.per_class < 1:
            raise ValueError("synthetic spec needs at least 1 sample per class")
        if self.size < 32:
            raise ValueError("synthetic images must be at least 32 pixels")


def class_blob_layout(k: int, n_classes: int, size: int) -> tuple[tuple[float, float], float]:
    """Nominal (row, col) blob center and Gaussian sigma for class ``k``."""
    angle = 2.0 * math.pi * k / n_classes + math.pi / 4.0
    radius = 0.24 * size
    center = (size / 2.0 + radius * math.sin(angle), size / 2.0 + radius * math.cos(angle))
    sigma = size * (0.065 + 0.02 * (k % 3))
    return center, sigma


def _render_sample(k: int, spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    # soft "thorax": darker periphery, brighter mid-field, low-frequency mottling
    r2 = ((yy - s / 2) / (0.48 * s)) ** 2 + ((xx - s / 2) / (0.42 * s)) ** 2
    base = 0.18 + 0.17 * np.exp(-r2) + 0.04 * (yy / s)
    mottle = cv2.GaussianBlur(rng.normal(0.0, 1.0, (s, s)), (0, 0), sigmaX=s / 16)
    mottle /= max(np.abs(mottle).max(), 1e-9)
    img = base + 0.04 * mottle

    (cy, cx), sigma = class_blob_layout(k, spec.classes, s)
    jitter = 0.05 * s
    cy += rng.uniform(-jitter, jitter)
    cx += rng.uniform(-jitter, jitter)
    sigma *= rng.uniform(0.9, 1.1)
    amplitude = rng.uniform(0.35, 0.5)
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    img = img + amplitude * bump
    # 2-sigma disc: where the blob still rises above the background mottling
    mask = bump > math.exp(-2.0)

    img = img + rng.normal(0.0, 0.025, (s, s))

    if spec.marker and rng.random() < 0.5:
        g = max(3, s // 12)
        corner = int(rng.integers(4))
        y0 = 2 if corner < 2 else s - 2 - g
        x0 = 2 if corner % 2 == 0 else s - 2 - g
        # "L"-shaped position label
        img[y0:y0 + g, x0:x0 + max(1, g // 3)] = 0.95
        img[y0 + g - max(1, g // 3):y0 + g, x0:x0 + g] = 0.95

    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def synthesize_dataset(spec: SynthSpec) -> list[Sample]:
    """Class-conditional soft Gaussian blobs on a textured background.

    Class ``k`` puts its blob around a class-specific location with a
    class-specific scale; the ground-truth blob mask (the 2-sigma disc) is
    attached as the annotation. Pure function of ``spec``.
    """
    spec.validate()
    samples = []
    for k in range(spec.classes):
        for i in range(spec.per_class):
            img, mask = _render_sample(k, spec, stream(spec.seed, "synth", k, i))
            samples.append(Sample(img, k, f"class{k}_{i:04d}", mask))
    return samples


def write_dataset(samples: Sequence[Sample], classes: Sequence[str], out_dir: str | Path) -> Path:
    """Write images (and masks) as PNG under ``out_dir`` plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        rel = f"images/{s.id}.png"
        save_image(out_dir / rel, s.image)
        ann = None
        if isinstance(s.annotation, np.ndarray):
            (out_dir / "masks").mkdir(exist_ok=True)
            ann = f"masks/{s.id}.png"
            save_image(out_dir / ann, s.annotation.astype(np.float32))
        elif isinstance(s.annotation, Box):
            (out_dir / "boxes").mkdir(exist_ok=True)
            ann = f"boxes/{s.id}.json"
            (out_dir / ann).write_text(json.dumps(s.annotation.to_dict()), encoding="utf-8")
        entries.append(ManifestEntry(rel, classes[s.label], ann))
    manifest_path = out_dir / "manifest.csv"
    write_manifest(Manifest(entries, list(classes), out_dir), manifest_path)
    return manifest_path


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldSplit:
    folds: list[list[str]]

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_ids(self, fold: int) -> list[str]:
        return [i for j, f in enumerate(self.folds) if j != fold for i in f]

    def test_ids(self, fold: int) -> list[str]:
        return list(self.folds[fold])


def stratified_folds(samples: Iterable, k: int = 5, seed: int = 0) -> FoldSplit:
    """Shuffle each class independently and deal its samples round-robin.

    The dealing position carries over from one class to the next so that
    remainders spread across folds instead of piling onto fold 0.
    ``samples`` may be anything with ``id`` and ``label`` attributes.
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    by_class: dict[int, list[str]] = defaultdict(list)
    for s in samples:
        by_class[s.label].append(s.id)
    for label, ids in sorted(by_class.items()):
        if len(ids) < k:
            raise DataError(f"class {label} has {len(ids)} samples, fewer than k={k}")
    folds: list[list[str]] = [[] for _ in range(k)]
    offset = 0
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        order = stream(seed, "folds", label).permutation(len(ids))
        for n, idx in enumerate(order):
            folds[(offset + n) % k].append(ids[idx])
        offset = (offset + len(ids)) % k
    return FoldSplit(folds)
