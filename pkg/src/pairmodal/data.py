"""Paired-modality image data: sample containers, stratified splits,
label-fraction views, folder ingestion, and a procedural synthetic generator.

Every image is float32, shape (side, side, 3), values in [0, 1], quantized to
the uint8 grid so that a PNG round trip is lossless.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

WLI = "wli"
NBI = "nbi"
MODALITIES = (WLI, NBI)

DEFAULT_NUM_CLASSES = 6
DEFAULT_SIDE = 64
DEFAULT_PATCH_SIZE = 8
DEFAULT_RATIOS = (0.6, 0.2, 0.2)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

# Entropy prefixes keeping the generator / split / labeling streams disjoint.
_GEN_STREAM = 101
_SPLIT_STREAM = 102
_LABEL_STREAM = 103


class DatasetError(ValueError):
    """Raised for malformed samples, folders, or split parameters."""


@dataclass(frozen=True)
class PairedSample:
    """One co-registered image pair. ``label`` is None for unlabeled samples."""

    id: str
    wli: np.ndarray
    nbi: np.ndarray
    label: Optional[int]

    def __post_init__(self) -> None:
        for name, img in ((WLI, self.wli), (NBI, self.nbi)):
            if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] != img.shape[1]:
                raise DatasetError(
                    f"sample {self.id!r}: {name} image must be (side, side, 3), got {img.shape}"
                )
            if img.dtype != np.float32:
                raise DatasetError(f"sample {self.id!r}: {name} image must be float32")
            if img.size and (img.min() < 0.0 or img.max() > 1.0):
                raise DatasetError(f"sample {self.id!r}: {name} pixel values outside [0, 1]")
        if self.wli.shape != self.nbi.shape:
            raise DatasetError(
                f"sample {self.id!r}: modality shapes differ: {self.wli.shape} vs {self.nbi.shape}"
            )
        if self.label is not None and self.label < 0:
            raise DatasetError(f"sample {self.id!r}: negative label {self.label}")

    @property
    def side(self) -> int:
        return self.wli.shape[0]


@dataclass(frozen=True)
class DatasetSplits:
    """Stratified train/val/test partition of a paired dataset."""

    train: tuple[PairedSample, ...]
    val: tuple[PairedSample, ...]
    test: tuple[PairedSample, ...]
    num_classes: int
    ratios: tuple[float, float, float]

    def __post_init__(self) -> None:
        ids = [s.id for part in (self.train, self.val, self.test) for s in part]
        if len(ids) != len(set(ids)):
            raise DatasetError("splits share sample ids")
        for s in self.train + self.val + self.test:
            if s.label is not None and s.label >= self.num_classes:
                raise DatasetError(f"sample {s.id!r}: label {s.label} >= {self.num_classes} classes")


@dataclass(frozen=True)
class LabelFractionView:
    """Train split re-divided into a labeled part and a label-hidden part."""

    labeled: tuple[PairedSample, ...]
    unlabeled: tuple[PairedSample, ...]
    fraction: float


def _check_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise DatasetError(f"ratios must be three non-negative numbers, got {ratios!r}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must sum to 1, got {ratios!r}")
    return (float(ratios[0]), float(ratios[1]), float(ratios[2]))


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_dataset(
    samples: Sequence[PairedSample],
    num_classes: int,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
) -> DatasetSplits:
    """Stratified split: each class is shuffled and cut by the same ratios."""
    ratios = _check_ratios(ratios)
    if num_classes < 1:
        raise DatasetError(f"num_classes must be >= 1, got {num_classes}")
    by_class: dict[int, list[PairedSample]] = {c: [] for c in range(num_classes)}
    for s in samples:
        if s.label is None:
            raise DatasetError(f"sample {s.id!r}: cannot split unlabeled samples")
        if s.label >= num_classes:
            raise DatasetError(f"sample {s.id!r}: label {s.label} >= {num_classes} classes")
        by_class[s.label].append(s)

    train: list[PairedSample] = []
    val: list[PairedSample] = []
    test: list[PairedSample] = []
    for c in range(num_classes):
        members = by_class[c]
        rng = np.random.default_rng([_SPLIT_STREAM, seed, c])
        order = rng.permutation(len(members))
        n = len(members)
        n_train = _round_half_up(ratios[0] * n)
        n_val = _round_half_up(ratios[1] * n)
        n_val = min(n_val, n - n_train)
        shuffled = [members[i] for i in order]
        train.extend(shuffled[:n_train])
        val.extend(shuffled[n_train : n_train + n_val])
        test.extend(shuffled[n_train + n_val :])
    return DatasetSplits(tuple(train), tuple(val), tuple(test), num_classes, ratios)


def make_label_fraction_view(
    splits: DatasetSplits, fraction: float, seed: int = 0
) -> LabelFractionView:
    """Keep labels on a per-class fraction of the train split, hide the rest.

    Per class with n members, round(fraction * n) stay labeled. The hidden
    samples keep their images but carry ``label=None``.
    """
    if not 0.0 < fraction <= 1.0:
        raise DatasetError(f"label fraction must be in (0, 1], got {fraction}")
    labeled: list[PairedSample] = []
    unlabeled: list[PairedSample] = []
    for c in range(splits.num_classes):
        members = [s for s in splits.train if s.label == c]
        n_keep = _round_half_up(fraction * len(members))
        rng = np.random.default_rng([_LABEL_STREAM, seed, c])
        keep = set(rng.permutation(len(members))[:n_keep].tolist())
        for i, s in enumerate(members):
            if i in keep:
                labeled.append(s)
            else:
                unlabeled.append(dataclasses.replace(s, label=None))
    return LabelFractionView(tuple(labeled), tuple(unlabeled), fraction)


# ---------------------------------------------------------------------------
# Synthetic generator.
#
# WLI renders a class-specific structure motif under a warm mucosa palette.
# NBI applies a fixed blue-green channel transform and adds a vessel overlay
# whose density is class-dependent. The last two classes share one WLI motif
# and differ only in vessel density, so their separating cue exists only in
# the NBI rendering; with five or more classes a second motif-sharing pair
# precedes them, widening the information gap between the modalities.
# ---------------------------------------------------------------------------

_MOTIFS = ("ring", "blobs", "stripes", "crater", "mesh")
_BASE_DENSITIES = (0.3, 0.5, 0.7, 0.4)
_PAIR_DENSITIES = (0.95, 0.05)
_SECOND_PAIR_DENSITIES = (0.90, 0.10)


def _class_recipe(class_id: int, num_classes: int) -> tuple[str, float]:
    if num_classes >= 2 and class_id >= num_classes - 2:
        return "lesion", _PAIR_DENSITIES[class_id - (num_classes - 2)]
    if num_classes >= 5 and class_id >= num_classes - 4:
        return "crater", _SECOND_PAIR_DENSITIES[class_id - (num_classes - 4)]
    return _MOTIFS[class_id % len(_MOTIFS)], _BASE_DENSITIES[class_id % len(_BASE_DENSITIES)]


def _unit_grid(side: int) -> tuple[np.ndarray, np.ndarray]:
    axis = np.linspace(0.0, 1.0, side)
    return np.meshgrid(axis, axis, indexing="ij")


def _normalize_field(field: np.ndarray) -> np.ndarray:
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


def _smooth_noise(rng: np.random.Generator, side: int, cells: int = 9) -> np.ndarray:
    """Low-resolution noise grid upsampled bilinearly, rescaled to [0, 1]."""
    grid = rng.normal(size=(cells, cells))
    pos = np.linspace(0.0, cells - 1.0, side)
    src = np.arange(cells, dtype=np.float64)
    rows = np.stack([np.interp(pos, src, grid[i]) for i in range(cells)])
    full = np.stack([np.interp(pos, src, rows[:, j]) for j in range(side)], axis=1)
    return _normalize_field(full)


def _structure_field(rng: np.random.Generator, side: int, motif: str) -> np.ndarray:
    yy, xx = _unit_grid(side)
    if motif == "ring":
        cy, cx = rng.uniform(0.35, 0.65, size=2)
        radius = rng.uniform(0.18, 0.3)
        width = rng.uniform(0.04, 0.08)
        dist = np.hypot(yy - cy, xx - cx)
        field = np.exp(-(((dist - radius) / width) ** 2))
    elif motif == "blobs":
        field = np.zeros((side, side))
        for _ in range(rng.integers(4, 8)):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            sig = rng.uniform(0.05, 0.1)
            field += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
        field = np.clip(field, 0.0, 1.0)
    elif motif == "stripes":
        angle = rng.uniform(0.0, np.pi)
        freq = rng.uniform(4.0, 7.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        proj = xx * np.cos(angle) + yy * np.sin(angle)
        field = 0.5 * (1.0 + np.sin(2 * np.pi * freq * proj + phase))
    elif motif == "crater":
        cy, cx = rng.uniform(0.4, 0.6, size=2)
        radius = rng.uniform(0.2, 0.32)
        width = rng.uniform(0.05, 0.09)
        dist = np.hypot(yy - cy, xx - cx)
        rim = np.exp(-(((dist - radius) / width) ** 2))
        pit = np.exp(-(dist**2) / (2 * (0.55 * radius) ** 2))
        field = np.clip(rim - 0.85 * pit, 0.0, 1.0)
    elif motif == "mesh":
        freq = rng.uniform(3.0, 5.0)
        py, px = rng.uniform(0.0, 2 * np.pi, size=2)
        gx = 0.5 * (1.0 + np.cos(2 * np.pi * freq * xx + px))
        gy = 0.5 * (1.0 + np.cos(2 * np.pi * freq * yy + py))
        field = np.clip(gx**8 + gy**8, 0.0, 1.0)
    elif motif == "lesion":
        cy, cx = rng.uniform(0.35, 0.65, size=2)
        radius = rng.uniform(0.28, 0.4)
        gamma = rng.uniform(1.0, 2.0)
        dist = np.hypot(yy - cy, xx - cx)
        field = np.clip(1.0 - dist / radius, 0.0, 1.0) ** gamma
    else:
        raise DatasetError(f"unknown motif {motif!r}")
    return field


def _vessel_mask(rng: np.random.Generator, side: int, density: float) -> np.ndarray:
    """Union of random-walk polylines; expected coverage scales with density."""
    mask = np.zeros((side, side), dtype=np.float64)
    n_vessels = int(round(density * 14))
    for _ in range(n_vessels):
        y0, x0 = rng.uniform(0, side, size=2)
        heading = rng.uniform(0.0, 2 * np.pi)
        steps = int(side * rng.uniform(0.5, 1.0))
        turns = rng.normal(0.0, 0.28, size=steps)
        headings = heading + np.cumsum(turns)
        ys = (y0 + np.cumsum(1.3 * np.sin(headings))).astype(int) % side
        xs = (x0 + np.cumsum(1.3 * np.cos(headings))).astype(int) % side
        mask[ys, xs] = 1.0
        mask[(ys + 1) % side, xs] = 1.0
    spread = (
        mask
        + np.roll(mask, 1, axis=1)
        + np.roll(mask, -1, axis=1)
        + np.roll(mask, 1, axis=0)
        + np.roll(mask, -1, axis=0)
    )
    return np.clip(0.45 * spread, 0.0, 1.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the uint8 grid so PNG save/load reproduces the exact array."""
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return (u8.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def generate_synthetic_pair(
    class_id: int,
    seed: int,
    side: int = DEFAULT_SIDE,
    num_classes: int = DEFAULT_NUM_CLASSES,
    patch_size: int = DEFAULT_PATCH_SIZE,
) -> PairedSample:
    """Render one co-registered WLI/NBI pair for the given class and seed."""
    if not 0 <= class_id < num_classes:
        raise DatasetError(f"class_id {class_id} outside [0, {num_classes})")
    if side < 32:
        raise DatasetError(f"side must be >= 32, got {side}")
    if side % patch_size != 0:
        raise DatasetError(f"side {side} not divisible by patch size {patch_size}")

    motif, density = _class_recipe(class_id, num_classes)
    rng = np.random.default_rng([_GEN_STREAM, class_id, seed, side])

    structure = _structure_field(rng, side, motif)
    texture = _smooth_noise(rng, side)
    field = np.clip(0.7 * structure + 0.3 * texture, 0.0, 1.0)

    wli = np.stack(
        [
            0.50 + 0.45 * field,
            0.22 + 0.38 * field,
            0.16 + 0.14 * field,
        ],
        axis=-1,
    )
    wli += rng.normal(0.0, 0.015, size=wli.shape)
    wli = np.clip(wli, 0.0, 1.0)

    # Fixed blue-green transform of the WLI rendering, then the vessel overlay.
    nbi = np.stack(
        [
            0.12 * wli[..., 0],
            0.46 * wli[..., 1] + 0.34 * field + 0.08,
            0.40 * wli[..., 2] + 0.30 * (1.0 - field) + 0.18,
        ],
        axis=-1,
    )
    vessels = _vessel_mask(rng, side, density)
    vessel_tint = np.stack([0.30 * vessels, -0.45 * vessels, -0.25 * vessels], axis=-1)
    nbi = np.clip(nbi + vessel_tint, 0.0, 1.0)

    return PairedSample(
        id=f"c{class_id}_s{seed}",
        wli=_quantize(wli),
        nbi=_quantize(nbi),
        label=class_id,
    )


def _class_name(class_id: int) -> str:
    return f"class{class_id:02d}"


def generate_synthetic_dataset(
    num_classes: int = DEFAULT_NUM_CLASSES,
    pairs_per_class: int = 10,
    side: int = DEFAULT_SIDE,
    seed: int = 0,
    patch_size: int = DEFAULT_PATCH_SIZE,
) -> list[PairedSample]:
    """Generate a balanced synthetic dataset with unique, stable sample ids."""
    if pairs_per_class < 1:
        raise DatasetError(f"pairs_per_class must be >= 1, got {pairs_per_class}")
    seed_rng = np.random.default_rng([_GEN_STREAM, seed])
    sample_seeds = seed_rng.integers(0, 2**31, size=(num_classes, pairs_per_class))
    samples = []
    for c in range(num_classes):
        for i in range(pairs_per_class):
            pair = generate_synthetic_pair(
                c, int(sample_seeds[c, i]), side=side, num_classes=num_classes, patch_size=patch_size
            )
            samples.append(dataclasses.replace(pair, id=f"{_class_name(c)}_{i:04d}"))
    return samples


# ---------------------------------------------------------------------------
# Folder layout: root/<class_name>/<stem>_wli.<ext> plus a matching _nbi file.
# Class index is the lexicographic rank of the class directory name.
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return (arr.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def write_paired_dataset(samples: Sequence[PairedSample], root: Path | str) -> Path:
    """Write samples as PNG pairs under class directories, plus a manifest."""
    root = Path(root)
    unlabeled = sorted(s.id for s in samples if s.label is None)
    if unlabeled:
        raise DatasetError(f"cannot write unlabeled samples: {unlabeled[:3]}")
    root.mkdir(parents=True, exist_ok=True)
    manifest_lines = []
    for s in sorted(samples, key=lambda s: (s.label, s.id)):
        class_dir = root / _class_name(s.label)
        class_dir.mkdir(exist_ok=True)
        stem = s.id.replace("/", "_")
        for modality, img in ((WLI, s.wli), (NBI, s.nbi)):
            u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(u8).save(class_dir / f"{stem}_{modality}.png")
        manifest_lines.append(f"{stem}\t{s.label}")
    manifest = root / MANIFEST_NAME
    manifest.write_text("\n".join(manifest_lines) + "\n")
    return manifest


def load_paired_dataset(
    root: Path | str,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
) -> DatasetSplits:
    """Ingest a class-directory tree of image pairs and split it."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root {root} contains no class directories")

    samples = []
    for class_index, class_dir in enumerate(class_dirs):
        stems: dict[str, dict[str, Path]] = {}
        for path in sorted(class_dir.iterdir()):
            if path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            for modality in MODALITIES:
                suffix = f"_{modality}"
                if path.stem.endswith(suffix):
                    stems.setdefault(path.stem[: -len(suffix)], {})[modality] = path
        if not stems:
            raise DatasetError(f"class directory {class_dir} contains no image pairs")
        incomplete = sorted(stem for stem, found in stems.items() if len(found) != 2)
        if incomplete:
            raise DatasetError(
                f"class directory {class_dir} has stems missing a modality: {incomplete}"
            )
        for stem in sorted(stems):
            samples.append(
                PairedSample(
                    id=f"{class_dir.name}/{stem}",
                    wli=_load_image(stems[stem][WLI]),
                    nbi=_load_image(stems[stem][NBI]),
                    label=class_index,
                )
            )
    return split_dataset(samples, num_classes=len(class_dirs), ratios=ratios, seed=seed)
