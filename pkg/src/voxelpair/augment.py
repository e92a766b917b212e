"""Local patch corruptions and intensity remapping for pretext training.

Three transforms: local pixel shuffling (per-box value permutation), local
region in-painting (box replacement with noise or a constant), and a global
monotone intensity map. `compose` applies intensity, then shuffle, then
in-paint, each gated by its own probability; in-painted content must not be
re-shuffled into its surroundings, hence the order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import comb


@dataclass
class ShuffleSpec:
    num_blocks: int = 10
    block_size_range: tuple[int, int] = (2, 6)
    probability: float = 0.8


@dataclass
class InpaintSpec:
    num_regions: int = 3
    region_size_range: tuple[int, int] = (4, 10)
    fill: str = "uniform_noise"  # or "constant"
    fill_value: float = 0.5
    probability: float = 0.5


@dataclass
class IntensitySpec:
    num_control_points: int = 6
    probability: float = 0.9


@dataclass
class AugmentationSpec:
    shuffle: ShuffleSpec = field(default_factory=ShuffleSpec)
    inpaint: InpaintSpec = field(default_factory=InpaintSpec)
    intensity: IntensitySpec = field(default_factory=IntensitySpec)
    seed: int = 0

    def __post_init__(self):
        for p in (self.shuffle.probability, self.inpaint.probability, self.intensity.probability):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if self.shuffle.num_blocks < 0 or self.inpaint.num_regions < 0:
            raise ValueError("block/region counts must be non-negative")
        if self.inpaint.fill not in ("uniform_noise", "constant"):
            raise ValueError(f"unknown fill mode {self.inpaint.fill!r}")


@dataclass
class AugmentedPatch:
    data: np.ndarray
    touched_mask: np.ndarray  # True where a local corruption replaced/permuted voxels

    def __post_init__(self):
        if self.touched_mask.shape != self.data.shape:
            raise ValueError("touched_mask must match data shape")


def _random_box(shape, size_range, rng) -> tuple[slice, ...]:
    lo, hi = size_range
    sides = [int(rng.integers(lo, min(hi, shape[i]) + 1)) for i in range(3)]
    starts = [int(rng.integers(0, shape[i] - sides[i] + 1)) for i in range(3)]
    return tuple(slice(s, s + w) for s, w in zip(starts, sides))


def local_pixel_shuffle(patch: np.ndarray, spec: ShuffleSpec, rng) -> AugmentedPatch:
    """Permute voxel values inside num_blocks random sub-boxes."""
    lo, _ = spec.block_size_range
    if lo > min(patch.shape):
        raise ValueError("shuffle blocks do not fit inside the patch")
    out = patch.copy()
    mask = np.zeros(patch.shape, dtype=bool)
    for _ in range(spec.num_blocks):
        box = _random_box(patch.shape, spec.block_size_range, rng)
        values = out[box].ravel()
        out[box] = rng.permutation(values).reshape(out[box].shape)
        mask[box] = True
    return AugmentedPatch(out, mask)


def local_inpaint(patch: np.ndarray, spec: InpaintSpec, rng) -> AugmentedPatch:
    """Replace num_regions random sub-boxes with noise or a constant."""
    lo, _ = spec.region_size_range
    if lo > min(patch.shape):
        raise ValueError("in-paint regions do not fit inside the patch")
    out = patch.copy()
    mask = np.zeros(patch.shape, dtype=bool)
    for _ in range(spec.num_regions):
        box = _random_box(patch.shape, spec.region_size_range, rng)
        if spec.fill == "uniform_noise":
            out[box] = rng.uniform(0.0, 1.0, size=out[box].shape).astype(patch.dtype)
        else:
            out[box] = patch.dtype.type(spec.fill_value)
        mask[box] = True
    return AugmentedPatch(out, mask)


def _monotone_curve(num_control_points: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Random monotone map [0,1]->[0,1]: a Bezier curve through sorted control
    points with pinned endpoints, densely sampled for interpolation."""
    k = max(num_control_points, 2)
    xs = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, k - 2)), [1.0]])
    ys = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, k - 2)), [1.0]])
    t = np.linspace(0.0, 1.0, 256)
    n = k - 1
    bern = np.stack([comb(n, i) * t**i * (1 - t) ** (n - i) for i in range(k)])
    # analytically monotone; accumulate guards against float jitter for interp
    return np.maximum.accumulate(bern.T @ xs), np.maximum.accumulate(bern.T @ ys)


def nonlinear_intensity(patch: np.ndarray, spec: IntensitySpec, rng) -> AugmentedPatch:
    """Apply a random monotone increasing intensity map; touches no voxel locally."""
    cx, cy = _monotone_curve(spec.num_control_points, rng)
    out = np.interp(patch, cx, cy).astype(patch.dtype)
    return AugmentedPatch(out, np.zeros(patch.shape, dtype=bool))


def compose(patch: np.ndarray, spec: AugmentationSpec, rng=None) -> AugmentedPatch:
    """Draw one augmentation sequence and apply it: intensity, shuffle, in-paint.

    Each stage fires independently with its configured probability. The two
    patches of a pair must be given independent rng streams.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    out = patch.copy()
    mask = np.zeros(patch.shape, dtype=bool)
    if rng.random() < spec.intensity.probability:
        out = nonlinear_intensity(out, spec.intensity, rng).data
    if rng.random() < spec.shuffle.probability:
        step = local_pixel_shuffle(out, spec.shuffle, rng)
        out, mask = step.data, mask | step.touched_mask
    if rng.random() < spec.inpaint.probability:
        step = local_inpaint(out, spec.inpaint, rng)
        out, mask = step.data, mask | step.touched_mask
    return AugmentedPatch(out, mask)
