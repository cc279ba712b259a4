"""Training objectives and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .bevgeo import rot_back
from .netcore import NumericError

DEFAULT_WEIGHTS = (2.0, 0.1, 1.0, 2.0, 1.0)
COMPONENTS = ("l_spat", "l_drm", "l_imi", "l_dir", "l_cons")
PROB_CLAMP = 1e-7
LEFT, STRAIGHT, RIGHT = 0, 1, 2
DIRECTIONS = ("left", "straight", "right")


class InvariantError(ValueError):
    pass


def l_spat(scores: torch.Tensor, labels) -> torch.Tensor:
    """Mean binary cross-entropy of sector objectness."""
    y = torch.as_tensor(labels, dtype=scores.dtype)
    p = scores.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def gaussian_kl(q_mean, q_scale, p_mean, p_scale) -> torch.Tensor:
    """Elementwise KL(q || p) between diagonal Gaussians.

    Clamped at zero: in float32 the closed form can dip a few ulps below it.
    """
    kl = torch.log(p_scale / q_scale) + (q_scale**2 + (q_mean - p_mean) ** 2) / (2.0 * p_scale**2) - 0.5
    return kl.clamp(min=0.0)


def l_drm(posteriors, priors, stop_prior: bool = False) -> torch.Tensor:
    """KL(posterior || prior), averaged over steps, sectors and channels.

    ``stop_prior`` detaches the prior so only the posterior is pulled.
    """
    if len(posteriors) != len(priors) or not posteriors:
        raise ValueError("need matching, non-empty posterior and prior sequences")
    terms = []
    for q, p in zip(posteriors, priors):
        if bool((q.scale <= 0).any()) or bool((p.scale <= 0).any()):
            raise InvariantError("latent scale must be strictly positive")
        pm, ps = (p.mean.detach(), p.scale.detach()) if stop_prior else (p.mean, p.scale)
        terms.append(gaussian_kl(q.mean, q.scale, pm, ps))
    return torch.stack(terms).mean()


def l_imi(pred: torch.Tensor, target) -> torch.Tensor:
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"trajectory shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def direction_label(traj, delta: float = 1.2) -> np.ndarray:
    """Per-step left/straight/right from the lateral coordinate; +-delta are inclusive turns."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    x = np.asarray(traj, dtype=float)[..., 0]
    out = np.full(x.shape, STRAIGHT, dtype=np.int64)
    out[x <= -delta] = LEFT
    out[x >= delta] = RIGHT
    return out


def l_dir(probs: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    picked = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp(min=PROB_CLAMP)).mean()


def l_cons(base: torch.Tensor, augmented: dict, rotations=(90, 180, 270)) -> torch.Tensor:
    """Rotation consistency: rotate every augmented plan back and L1 it against the base.

    ``base`` is (..., T, 2); returns the mean over leading axes of
    sum_t sum_r |rot_back(P^r) - P^0|_1 / (T |R|).
    """
    missing = [r for r in rotations if r not in augmented]
    if missing:
        raise ValueError(f"missing augmented predictions for rotations {missing}")
    if not rotations:
        return base.sum() * 0.0
    T = base.shape[-2]
    total = 0.0
    for r in rotations:
        diff = rot_back(augmented[r], r) - base
        total = total + diff.abs().sum(dim=(-1, -2))
    return (total / (T * len(rotations))).mean()


@dataclass
class LossReport:
    l_spat: float = 0.0
    l_drm: float = 0.0
    l_imi: float = 0.0
    l_dir: float = 0.0
    l_cons: float = 0.0
    total: float = 0.0
    weights: tuple = DEFAULT_WEIGHTS
    total_tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def as_line(self, step: int) -> str:
        vals = " ".join(f"{k}={getattr(self, k):.9g}" for k in (*COMPONENTS, "total"))
        return f"step={step} {vals}"


def total_loss(components: dict, weights=DEFAULT_WEIGHTS) -> LossReport:
    """Weighted sum; components that are absent or carry zero weight add nothing (and no gradient)."""
    if len(weights) != len(COMPONENTS):
        raise ValueError("expected five loss weights")
    report = LossReport(weights=tuple(float(w) for w in weights))
    total = None
    value_sum = 0.0
    for name, w in zip(COMPONENTS, weights):
        if name not in components:
            continue
        value = components[name]
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not np.isfinite(v):
            raise NumericError(f"loss component {name} is not finite ({v})")
        if v < 0:
            raise InvariantError(f"loss component {name} is negative ({v})")
        setattr(report, name, v)
        if w == 0:
            continue
        value_sum += w * v
        if isinstance(value, torch.Tensor):
            term = w * value
            total = term if total is None else total + term
    report.total = value_sum
    report.total_tensor = total
    return report
