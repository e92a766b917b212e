"""Volume container, .vvol on-disk format, preprocessing pipelines, synthetic data.

Arrays are indexed (z, y, x); ``spacing`` is mm per voxel in the same axis
order, so the CT target spacing of 1x1x2 mm (in-plane x in-plane x slice)
is written (2.0, 1.0, 1.0) here.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

MRI_SPACING = (1.5, 1.5, 1.5)
MRI_CROP_THRESHOLD = 0.3
MRI_PERCENTILES = (0.01, 99.9)
CT_SPACING = (2.0, 1.0, 1.0)  # slice axis first
CT_CROP_THRESHOLD_HU = -500.0
CT_CLIP_HU = (-1350.0, 1000.0)

_VVOL_MAGIC = b"VVOL"
_VVOL_VERSION = 1
_DTYPE_F32 = 0
_DTYPE_U8 = 1


class Modality(Enum):
    CT = "ct"
    MRI = "mri"
    SYNTHETIC = "synthetic"


class VvolError(ValueError):
    """Raised for malformed .vvol files (bad magic/version, truncation)."""


@dataclass
class Volume:
    """A 3D scalar grid with voxel spacing metadata."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    modality: Modality = Modality.SYNTHETIC

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be 3D non-empty, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabeledVolume:
    """A volume plus a same-shape integer class map."""

    volume: Volume
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.shape != self.volume.data.shape:
            raise ValueError(
                f"labels shape {self.labels.shape} != volume shape {self.volume.data.shape}"
            )
        if self.num_classes < 1 or int(self.labels.max()) >= self.num_classes:
            raise ValueError("labels must satisfy max(labels) < num_classes")


def resample(data: np.ndarray, spacing, new_spacing, order: int = 1) -> np.ndarray:
    """Resample to a new voxel spacing (order=1: trilinear, order=0: nearest).

    Output voxel i sits at physical position i*new_spacing; dims are chosen so
    every sample point lies inside the input extent.
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    new_spacing = np.asarray(new_spacing, dtype=np.float64)
    if np.array_equal(spacing, new_spacing):
        return np.asarray(data).copy()
    new_shape = np.floor((np.array(data.shape) - 1) * spacing / new_spacing).astype(int) + 1
    axes = [np.arange(n) * new_spacing[i] / spacing[i] for i, n in enumerate(new_shape)]
    grid = np.meshgrid(*axes, indexing="ij")
    out = map_coordinates(
        np.asarray(data, dtype=np.float64), np.stack(grid), order=order, mode="nearest"
    )
    return out


def bounding_box(mask: np.ndarray) -> tuple[tuple[int, int], ...]:
    """Minimal (start, stop) per axis covering all True voxels. Empty mask -> error."""
    if not mask.any():
        raise ValueError("empty crop: no voxel exceeds the threshold")
    box = []
    for ax in range(mask.ndim):
        proj = mask.any(axis=tuple(i for i in range(mask.ndim) if i != ax))
        idx = np.flatnonzero(proj)
        box.append((int(idx[0]), int(idx[-1]) + 1))
    return tuple(box)


def _crop_to_box(data: np.ndarray, box) -> np.ndarray:
    sl = tuple(slice(a, b) for a, b in box)
    return data[sl]


def _clip_minmax(data: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Clip to [lo, hi], then min-max scale the result to [0, 1].

    Equals the affine (x - lo) / (hi - lo) whenever the data spans the clip
    bounds; re-applying to the [0, 1] output is an exact no-op.
    """
    clipped = np.clip(data, lo, hi)
    mn, mx = float(clipped.min()), float(clipped.max())
    if mx - mn <= 0:
        raise ValueError("degenerate intensity range: volume is constant after clipping")
    return (clipped - mn) / (mx - mn)


def preprocess_mri(raw: Volume) -> Volume:
    """MRI pipeline: resample to 1.5mm iso, percentile clip + scale, crop > 0.3."""
    if raw.modality is not Modality.MRI:
        raise ValueError(f"expected MRI volume, got {raw.modality}")
    if not np.isfinite(raw.data).all():
        raise ValueError("non-finite intensities in input volume")
    data = resample(raw.data, raw.spacing, MRI_SPACING)
    lo, hi = np.percentile(data, MRI_PERCENTILES)
    data = _clip_minmax(data, float(lo), float(hi))
    box = bounding_box(data > MRI_CROP_THRESHOLD)
    data = _crop_to_box(data, box)
    return Volume(data.astype(np.float32), MRI_SPACING, Modality.MRI)


def preprocess_ct(raw: Volume) -> Volume:
    """CT pipeline: resample to 1x1x2mm, crop > -500 HU, clip [-1350, 1000] + scale."""
    if raw.modality is not Modality.CT:
        raise ValueError(f"expected CT volume, got {raw.modality}")
    if not np.isfinite(raw.data).all():
        raise ValueError("non-finite intensities in input volume")
    data = resample(raw.data, raw.spacing, CT_SPACING)
    box = bounding_box(data > CT_CROP_THRESHOLD_HU)
    data = _crop_to_box(data, box)
    data = _clip_minmax(data, *CT_CLIP_HU)
    return Volume(data.astype(np.float32), CT_SPACING, Modality.CT)


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal(shape), sigma=sigma)
    return field / max(field.std(), 1e-8)


def _farthest_point_seeds(rng: np.random.Generator, shape, count: int) -> np.ndarray:
    """Greedy max-min-distance seed placement away from the volume walls."""
    margin = np.array([0.15 * s for s in shape])
    candidates = rng.uniform(margin, np.array(shape) - margin, size=(max(64, 8 * count), 3))
    seeds = [candidates[0]]
    while len(seeds) < count:
        dists = np.min(
            np.linalg.norm(candidates[:, None, :] - np.array(seeds)[None], axis=-1), axis=1
        )
        seeds.append(candidates[int(np.argmax(dists))])
    return np.array(seeds)


def _synthesize(rng: np.random.Generator, shape, num_classes: int):
    """One attempt at labels+intensities; class fractions are checked by the caller."""
    min_dim = min(shape)
    labels = np.zeros(shape, dtype=np.uint8)
    if num_classes > 1:
        seeds = _farthest_point_seeds(rng, shape, num_classes - 1)
        grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1)
        warped = np.empty((num_classes - 1,) + tuple(shape))
        for c in range(num_classes - 1):
            stretch = rng.uniform(0.8, 1.3, size=3)
            dist = np.linalg.norm((grid - seeds[c]) / stretch, axis=-1)
            warped[c] = dist + 0.1 * min_dim * _smooth_field(rng, shape, min_dim / 6)
        min_dist = warped.min(axis=0)
        foreground_fraction = rng.uniform(0.48, 0.58)
        radius = np.quantile(min_dist, foreground_fraction)
        inside = min_dist <= radius
        labels[inside] = warped.argmin(axis=0)[inside] + 1

    data = 0.10 + 0.05 * _smooth_field(rng, shape, min_dim / 4)
    # classes come in pairs sharing a mean but with contrasting texture
    # (rough voxel noise vs near-flat), so intensity level alone cannot
    # separate them and fine-grained features have to carry the signal
    n_organs = max(num_classes - 1, 1)
    pair_means = np.linspace(0.42, 0.85, (n_organs + 1) // 2)
    rng.shuffle(pair_means)
    for c in range(1, num_classes):
        mask = labels == c
        count = int(mask.sum())
        mean = pair_means[(c - 1) // 2]
        if c % 2 == 1:  # rough partner of the pair
            data[mask] = mean + 0.13 * rng.standard_normal(count)
        else:  # smooth partner
            texture = gaussian_filter(rng.standard_normal(shape), sigma=2.0)
            data[mask] = mean + 0.02 * texture[mask]
    data += 0.04 * _smooth_field(rng, shape, min_dim / 3) + 0.02 * rng.standard_normal(shape)
    return np.clip(data, 0.0, 1.0).astype(np.float32), labels


def generate_synthetic_volume(
    seed: int, shape: tuple[int, int, int], num_classes: int
) -> LabeledVolume:
    """Deterministic blob phantom with intensity-texture-coded organ classes.

    Class 0 is dark background; classes 1..K-1 are compact noise-warped blobs
    grown around spread-out seed points. Classes are paired: both partners of
    a pair share an intensity mean but differ sharply in texture, plus a
    smooth bias field and voxel noise over everything. Every class occupies
    between 0.5% and 60% of the volume (internally retried, then rejected, if
    an attempt lands outside a stricter margin).
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 32:
        raise ValueError(f"shape must be 3 ints each >= 32, got {shape}")
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    if num_classes - 1 > (min(shape) // 12) ** 3:
        raise ValueError(f"shape {shape} too small for {num_classes} classes")

    for attempt in range(8):
        rng = np.random.default_rng(np.random.SeedSequence([0x5B0B, seed, attempt]))
        data, labels = _synthesize(rng, shape, num_classes)
        if num_classes == 1:
            break
        fractions = np.bincount(labels.ravel(), minlength=num_classes) / labels.size
        if fractions.min() > 0.008 and fractions.max() < 0.58:
            break
    else:
        raise ValueError(f"could not synthesize {num_classes} balanced classes in {shape}")
    vol = Volume(data, (1.0, 1.0, 1.0), Modality.SYNTHETIC)
    return LabeledVolume(vol, labels, num_classes)


# --- .vvol container -------------------------------------------------------
# magic "VVOL" | version u32 | dtype u8 (0=f32, 1=u8) | dims 3*u32
# | spacing 3*f32 | payload C-order (axis 0 slowest), little-endian throughout.

_HEADER = struct.Struct("<4sIB3I3f")


def _write_vvol(path, array: np.ndarray, spacing, dtype_code: int) -> None:
    payload = np.ascontiguousarray(array).tobytes()
    header = _HEADER.pack(
        _VVOL_MAGIC, _VVOL_VERSION, dtype_code, *array.shape, *(float(s) for s in spacing)
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + payload)
    tmp.replace(path)


def _read_vvol(path) -> tuple[np.ndarray, tuple[float, float, float], int]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise VvolError(f"{path}: truncated header")
    magic, version, dtype_code, d0, d1, d2, s0, s1, s2 = _HEADER.unpack_from(blob)
    if magic != _VVOL_MAGIC:
        raise VvolError(f"{path}: bad magic {magic!r}")
    if version != _VVOL_VERSION:
        raise VvolError(f"{path}: unsupported version {version}")
    if dtype_code not in (_DTYPE_F32, _DTYPE_U8):
        raise VvolError(f"{path}: unknown dtype code {dtype_code}")
    dtype = np.dtype("<f4") if dtype_code == _DTYPE_F32 else np.dtype("u1")
    expected = d0 * d1 * d2 * dtype.itemsize
    payload = blob[_HEADER.size:]
    if len(payload) != expected:
        raise VvolError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    array = np.frombuffer(payload, dtype=dtype).reshape(d0, d1, d2)
    return array, (s0, s1, s2), dtype_code


def save_volume(volume: Volume, path) -> None:
    _write_vvol(path, volume.data.astype("<f4"), volume.spacing, _DTYPE_F32)


def load_volume(path, modality: Modality = Modality.SYNTHETIC) -> Volume:
    array, spacing, dtype_code = _read_vvol(path)
    if dtype_code != _DTYPE_F32:
        raise VvolError(f"{path}: label container, use load_labels")
    return Volume(array.copy(), spacing, modality)


def save_labels(labels: np.ndarray, spacing, path) -> None:
    _write_vvol(path, np.ascontiguousarray(labels, dtype=np.uint8), spacing, _DTYPE_U8)


def load_labels(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    array, spacing, dtype_code = _read_vvol(path)
    if dtype_code != _DTYPE_U8:
        raise VvolError(f"{path}: intensity container, use load_volume")
    return array.copy(), spacing


# --- dataset manifest ------------------------------------------------------


@dataclass
class DatasetManifest:
    """Lists the (volume, labels) file pairs of a generated dataset."""

    num_classes: int
    cases: list[dict] = field(default_factory=list)

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps({"num_classes": self.num_classes, "cases": self.cases}, indent=2)
        )

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        raw = json.loads(Path(path).read_text())
        return cls(num_classes=int(raw["num_classes"]), cases=list(raw["cases"]))


def load_dataset(manifest_path) -> tuple[list[LabeledVolume], int]:
    """Load every case listed in a manifest, resolving paths relative to it."""
    manifest = DatasetManifest.load(manifest_path)
    base = Path(manifest_path).parent
    out = []
    for case in manifest.cases:
        vol = load_volume(base / case["volume"])
        labels, _ = load_labels(base / case["labels"])
        out.append(LabeledVolume(vol, labels, manifest.num_classes))
    return out, manifest.num_classes
