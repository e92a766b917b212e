"""Overlapping patch pairs and positive-voxel sampling from their overlap.

Patch coordinates are translation-only: a voxel at volume coordinate p lives
at p - origin inside a patch, so positives across the two patches are exact
integer correspondences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volio import Volume

_REJECTION_CAP = 1000


@dataclass
class PatchPair:
    """Two same-size crops of one volume plus their exact overlap geometry."""

    patch_a: np.ndarray
    patch_b: np.ndarray
    origin_a: np.ndarray  # int 3-vector, volume coords
    origin_b: np.ndarray
    overlap_box: tuple[tuple[int, int], ...]  # (start, stop) per axis, volume coords

    def __post_init__(self):
        self.origin_a = np.asarray(self.origin_a, dtype=np.int64)
        self.origin_b = np.asarray(self.origin_b, dtype=np.int64)
        if self.patch_a.shape != self.patch_b.shape:
            raise ValueError("patches must share a shape")
        if any(b <= a for a, b in self.overlap_box):
            raise ValueError("overlap box must be non-empty")

    @property
    def patch_size(self) -> tuple[int, ...]:
        return self.patch_a.shape

    @property
    def overlap_voxels(self) -> int:
        return int(np.prod([b - a for a, b in self.overlap_box]))


@dataclass
class VoxelBatch:
    """n paired voxel coordinates, one per patch frame; index i matches across."""

    coords_a: np.ndarray  # (n, 3) int, patch-local
    coords_b: np.ndarray
    n: int

    def __post_init__(self):
        self.coords_a = np.asarray(self.coords_a, dtype=np.int64)
        self.coords_b = np.asarray(self.coords_b, dtype=np.int64)
        if self.coords_a.shape != (self.n, 3) or self.coords_b.shape != (self.n, 3):
            raise ValueError("coords must be (n, 3)")


def overlap_of(origin_a, origin_b, patch_size) -> tuple[tuple[int, int], ...] | None:
    """Intersection of the two patch extents in volume coordinates, or None."""
    box = []
    for ax in range(3):
        lo = max(origin_a[ax], origin_b[ax])
        hi = min(origin_a[ax] + patch_size[ax], origin_b[ax] + patch_size[ax])
        if hi <= lo:
            return None
        box.append((int(lo), int(hi)))
    return tuple(box)


def sample_patch_pair(
    volume: Volume,
    patch_size: tuple[int, int, int],
    min_overlap_fraction: float,
    rng: np.random.Generator,
) -> PatchPair:
    """Crop two overlapping patches, uniform over valid origin pairs.

    Rejection-samples origin pairs up to a cap, then falls back to exhaustive
    enumeration over offset deltas weighted by compatible placements, which is
    the same uniform distribution.
    """
    patch_size = tuple(int(p) for p in patch_size)
    shape = volume.data.shape
    if any(shape[i] < patch_size[i] for i in range(3)):
        raise ValueError(f"volume {shape} smaller than patch {patch_size}")
    if not 0 < min_overlap_fraction <= 1:
        raise ValueError("min_overlap_fraction must be in (0, 1]")
    patch_volume = int(np.prod(patch_size))
    need = min_overlap_fraction * patch_volume
    max_origin = [shape[i] - patch_size[i] for i in range(3)]

    origin_a = origin_b = None
    for _ in range(_REJECTION_CAP):
        a = np.array([rng.integers(0, m + 1) for m in max_origin])
        b = np.array([rng.integers(0, m + 1) for m in max_origin])
        ext = [max(0, patch_size[i] - abs(int(a[i] - b[i]))) for i in range(3)]
        if np.prod(ext) >= need:
            origin_a, origin_b = a, b
            break
    if origin_a is None:
        origin_a, origin_b = _exhaustive_pair(rng, patch_size, max_origin, need)
        if origin_a is None:
            raise ValueError(
                f"no origin pair satisfies overlap >= {min_overlap_fraction} of patch"
            )

    box = overlap_of(origin_a, origin_b, patch_size)
    assert box is not None
    crop = lambda o: volume.data[
        o[0]:o[0] + patch_size[0], o[1]:o[1] + patch_size[1], o[2]:o[2] + patch_size[2]
    ].copy()
    return PatchPair(crop(origin_a), crop(origin_b), origin_a, origin_b, box)


def _exhaustive_pair(rng, patch_size, max_origin, need):
    """Uniform over all valid (origin_a, origin_b): pick the delta with weight =
    number of compatible origin_a placements, then origin_a uniformly."""
    deltas, weights = [], []
    ranges = [np.arange(-m, m + 1) for m in max_origin]
    for d0 in ranges[0]:
        e0 = patch_size[0] - abs(d0)
        if e0 <= 0:
            continue
        for d1 in ranges[1]:
            e1 = patch_size[1] - abs(d1)
            if e1 <= 0 or e0 * e1 * patch_size[2] < need:
                continue
            for d2 in ranges[2]:
                e2 = patch_size[2] - abs(d2)
                if e2 <= 0 or e0 * e1 * e2 < need:
                    continue
                delta = (int(d0), int(d1), int(d2))
                count = np.prod([max_origin[i] - abs(delta[i]) + 1 for i in range(3)])
                if count > 0:
                    deltas.append(delta)
                    weights.append(count)
    if not deltas:
        return None, None
    weights = np.asarray(weights, dtype=np.float64)
    delta = deltas[rng.choice(len(deltas), p=weights / weights.sum())]
    origin_a = np.array(
        [rng.integers(max(0, -delta[i]), max_origin[i] - max(0, delta[i]) + 1) for i in range(3)]
    )
    return origin_a, origin_a + np.asarray(delta)


def sample_positive_pairs(pair: PatchPair, n: int, rng: np.random.Generator) -> VoxelBatch:
    """Draw n distinct overlap voxels uniformly without replacement, in both frames."""
    if n < 1:
        raise ValueError("n must be positive")
    total = pair.overlap_voxels
    if total < n:
        raise ValueError(f"overlap holds {total} voxels, cannot sample {n} without replacement")
    extents = [b - a for a, b in pair.overlap_box]
    flat = rng.choice(total, size=n, replace=False)
    local = np.stack(np.unravel_index(flat, extents), axis=1)
    vol_coords = local + np.array([a for a, _ in pair.overlap_box])
    return VoxelBatch(
        coords_a=vol_coords - pair.origin_a,
        coords_b=vol_coords - pair.origin_b,
        n=n,
    )
