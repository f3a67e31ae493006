"""Training objectives.

Every loss returns a :class:`LossValue` whose ``value`` is a scalar tensor
that still carries the autograd graph, plus a detached per-term breakdown.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import torch

from .errors import InvalidInputError

PRETRAIN_PARTS = ("reconstruction", "adversarial", "topological")


@dataclass
class LossValue:
    value: torch.Tensor
    components: Dict[str, float] = field(default_factory=dict)

    def __float__(self) -> float:
        return float(self.value.detach())

    def backward(self, **kwargs) -> None:
        self.value.backward(**kwargs)


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian noise added inside the topological loss; std=0 disables it."""

    mean: float = 0.0
    std: float = 0.1
    per_element: bool = True

    def __post_init__(self):
        if self.std < 0:
            raise InvalidInputError("noise std must be non-negative")


def _per_sample_norm(diff: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(diff.reshape(diff.shape[0], -1), ord=2, dim=1)


def loss_reconstruction(y: torch.Tensor, x: torch.Tensor, squared: bool = False) -> LossValue:
    """Batch mean of the per-sample L2 norm ``||y - x||`` (squared norm if ``squared``)."""
    if y.shape != x.shape:
        raise InvalidInputError(f"reconstruction shape {tuple(y.shape)} != target shape {tuple(x.shape)}")
    norms = _per_sample_norm(y - x)
    if squared:
        norms = norms ** 2
    value = norms.mean()
    return LossValue(value, {"L_r": float(value.detach())})


def loss_adversarial(
    critic: Callable[[torch.Tensor], torch.Tensor],
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
) -> Tuple[LossValue, LossValue]:
    """WGAN objective ``L_g = mean F(real) - mean F(fake)``.

    Returns ``(g_loss, f_loss)`` for minimizing optimizers: the reconstruction
    side minimizes ``-mean F(fake)``, the critic minimizes ``-L_g``.  Clipping
    the critic after its update is the caller's job (see
    :func:`ifom.models.clip_parameters`).
    """
    if len(real_batch) == 0 or len(fake_batch) == 0:
        raise InvalidInputError("adversarial loss needs non-empty batches")
    real_scores = critic(real_batch).reshape(-1)
    fake_scores = critic(fake_batch).reshape(-1)
    gap = real_scores.mean() - fake_scores.mean()
    g = -fake_scores.mean()
    parts = {"L_g": float(gap.detach())}
    return LossValue(g, dict(parts, g_loss=float(g.detach()))), LossValue(-gap, dict(parts, f_loss=float(-gap.detach())))


def sample_delta(shape, noise: NoiseSpec, rng: Optional[torch.Generator], dtype=torch.float32) -> torch.Tensor:
    if noise.std == 0:
        return torch.full(shape, noise.mean, dtype=dtype)
    if noise.per_element:
        draw = torch.randn(shape, generator=rng, dtype=dtype)
    else:
        draw = torch.randn((shape[0], 1), generator=rng, dtype=dtype).expand(shape)
    return noise.mean + noise.std * draw


def loss_topological(
    z_ij: torch.Tensor,
    z_i: torch.Tensor,
    z_j: torch.Tensor,
    eps: torch.Tensor,
    noise: NoiseSpec = NoiseSpec(),
    rng: Optional[torch.Generator] = None,
    delta: Optional[torch.Tensor] = None,
) -> LossValue:
    """Mean over pairs of ``||z_ij - (eps z_i + (1-eps) z_j) + delta||``.

    ``eps`` must be the same per-pair values used to mix the images.  ``delta``
    is drawn fresh from ``noise`` unless given explicitly; it never receives
    gradients.
    """
    n = z_ij.shape[0]
    if not (z_i.shape == z_j.shape == z_ij.shape):
        raise InvalidInputError("embedding batches must have identical shapes")
    eps = torch.as_tensor(eps, dtype=z_ij.dtype).reshape(-1)
    if eps.shape[0] != n:
        raise InvalidInputError(f"got {eps.shape[0]} mixing weights for {n} pairs")
    if torch.any(eps < 0) or torch.any(eps > 1):
        raise InvalidInputError("mixing weights must lie in [0, 1]")
    e = eps.unsqueeze(1)
    z_hat = e * z_i + (1 - e) * z_j
    if delta is None:
        delta = sample_delta(z_ij.shape, noise, rng, z_ij.dtype)
    delta = torch.as_tensor(delta, dtype=z_ij.dtype).detach()
    value = _per_sample_norm(z_ij - z_hat + delta).mean()
    return LossValue(value, {"L_t": float(value.detach())})


def loss_crossentropy(v: torch.Tensor, u: torch.Tensor, clamp: float = 1e-7) -> LossValue:
    """Binary cross-entropy of spoofness scores ``v`` against labels ``u`` (1 = attack)."""
    v = torch.as_tensor(v)
    u = torch.as_tensor(u, dtype=v.dtype)
    if v.shape != u.shape:
        raise InvalidInputError(f"{v.numel()} scores vs {u.numel()} labels")
    v = v.clamp(clamp, 1 - clamp)
    value = -(u * torch.log(v) + (1 - u) * torch.log(1 - v)).mean()
    return LossValue(value, {"L_c": float(value.detach())})


def loss_crossentropy_logits(logits: torch.Tensor, u: torch.Tensor, clamp: float = 1e-7) -> LossValue:
    return loss_crossentropy(torch.sigmoid(logits), u, clamp)


def combined_pretrain_loss(parts: Mapping[str, Union[LossValue, float, torch.Tensor]]) -> LossValue:
    """Unweighted sum of the reconstruction, adversarial (generator side) and topological terms."""
    missing = [k for k in PRETRAIN_PARTS if k not in parts]
    if missing:
        raise InvalidInputError(f"missing loss components: {missing}")
    values = {}
    for name in PRETRAIN_PARTS:
        part = parts[name]
        values[name] = part.value if isinstance(part, LossValue) else torch.as_tensor(part, dtype=torch.float64)
    total = sum(values.values())
    return LossValue(total, {k: float(torch.as_tensor(v).detach()) for k, v in values.items()})
