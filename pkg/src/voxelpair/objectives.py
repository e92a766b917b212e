"""Hybrid contrastive-restorative objective.

The contrastive term is a symmetrized voxel-level InfoNCE: each anchor faces
its single positive (the same volume location seen from the other patch) and
2*(n-1) negatives (every other sampled voxel from both patches). The
restorative term is plain MSE against the *unaugmented* crops. The total is
their weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

NORM_TOLERANCE = 1e-4


@dataclass
class LossConfig:
    tau: float = 0.1
    lam: float = 10.0  # restorative weight ("lambda" in config files)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass
class LossReport:
    l_c: float
    l_r: float
    l_total: float

    @classmethod
    def build(cls, l_c: float, l_r: float, lam: float) -> "LossReport":
        return cls(float(l_c), float(l_r), float(l_c) + lam * float(l_r))


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x)


def anchor_logits(z_anchor: torch.Tensor, z_other: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-anchor similarity logits, shape (n, 2n-1).

    Column 0 holds the positive; the remaining 2*(n-1) columns hold the
    negatives: same-side voxels j != i, then other-side voxels j != i.
    """
    n = z_anchor.shape[0]
    sim_same = (z_anchor @ z_anchor.T) / tau
    sim_cross = (z_anchor @ z_other.T) / tau
    off_diag = ~torch.eye(n, dtype=torch.bool, device=z_anchor.device)
    positive = sim_cross.diagonal().unsqueeze(1)
    neg_same = sim_same[off_diag].reshape(n, n - 1)
    neg_cross = sim_cross[off_diag].reshape(n, n - 1)
    return torch.cat([positive, neg_same, neg_cross], dim=1)


def _directional_nce(z_anchor, z_other, tau) -> torch.Tensor:
    logits = anchor_logits(z_anchor, z_other, tau)
    # -log(pos / sum) = logsumexp(row) - pos; logsumexp subtracts the row max
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).sum()


def info_nce(z_a, z_b, tau: float) -> torch.Tensor:
    """Symmetrized InfoNCE over n positive pairs of unit vectors.

    Sums over anchors (one direction), then averages the two anchor
    directions. Differentiable when given tensors.
    """
    z_a, z_b = _as_tensor(z_a), _as_tensor(z_b)
    if z_a.ndim != 2 or z_a.shape != z_b.shape or z_a.shape[0] < 1:
        raise ValueError(f"expected matching (n, d) inputs with n >= 1, got {tuple(z_a.shape)}")
    with torch.no_grad():
        norms = torch.linalg.vector_norm(torch.cat([z_a, z_b]), dim=1)
        worst = (norms - 1.0).abs().max().item()
        if worst > NORM_TOLERANCE:
            raise ValueError(f"inputs must be unit vectors within {NORM_TOLERANCE}, off by {worst:.2e}")
    return (_directional_nce(z_a, z_b, tau) + _directional_nce(z_b, z_a, tau)) / 2


def mse_recon(x_a, xhat_a, x_b, xhat_b) -> torch.Tensor:
    """Reconstruction MSE against the unaugmented crops, averaged over the pair."""
    x_a, xhat_a, x_b, xhat_b = map(_as_tensor, (x_a, xhat_a, x_b, xhat_b))
    if x_a.shape != xhat_a.shape or x_b.shape != xhat_b.shape:
        raise ValueError("prediction/target shapes must match")
    return ((x_a - xhat_a).square().mean() + (x_b - xhat_b).square().mean()) / 2


def hybrid_loss(l_c, l_r, lam: float):
    """Total objective: contrastive plus lambda-weighted restorative."""
    return l_c + lam * l_r
