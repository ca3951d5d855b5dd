"""Adaptive heatmap regression: learnable sigmas/rotation and a plateau scheduler.

The loss is

    L = mean_c ||pred_c - target_c||^2 / n_pixels + alpha * mean_c ||sigma_c||^2

where ``target`` is the Gaussian heatmap rendered from the current
:class:`CovarianceSpec`. The rotation angles are not regularised.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .encode import CovarianceSpec, HeatmapLike, as_values, encode, encode_grad

__all__ = [
    "LossConfig",
    "SchedulerState",
    "NesterovSGD",
    "heatmap_l2_loss",
    "loss_grad_sigma",
    "gradient_step",
    "adaloss_update",
    "fit_sigma",
    "render_target",
]


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 5.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError("alpha must be finite and >= 0")


def _pair(pred: HeatmapLike, target: HeatmapLike) -> tuple[NDArray, NDArray]:
    p = np.asarray(as_values(pred), dtype=np.float64)
    t = np.asarray(as_values(target), dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"pred shape {p.shape} != target shape {t.shape}")
    return p, t


def heatmap_l2_loss(pred: HeatmapLike, target: HeatmapLike, cov: CovarianceSpec,
                    cfg: LossConfig = LossConfig()) -> float:
    p, t = _pair(pred, target)
    if p.shape[0] != cov.n_classes:
        raise ValueError(f"{p.shape[0]} heatmap channels for {cov.n_classes} covariance classes")
    n_pixels = int(np.prod(p.shape[1:]))
    data = ((p - t) ** 2).reshape(p.shape[0], -1).sum(axis=1).mean() / n_pixels
    reg = cfg.alpha * (cov.sigmas**2).sum(axis=1).mean()
    return float(data + reg)


def loss_grad_sigma(pred: HeatmapLike, landmarks, cov: CovarianceSpec,
                    cfg: LossConfig = LossConfig()) -> tuple[float, NDArray[np.float64], NDArray[np.float64]]:
    """Loss and its gradients w.r.t. ``cov.sigmas`` and ``cov.rotation``.

    ``landmarks`` (C, [I,] D) define the target, which is re-rendered from
    ``cov`` so the gradient chains through the heatmap generator.
    """
    p = np.asarray(as_values(pred), dtype=np.float64)
    heatmap, d_sigma, d_rot = encode_grad(landmarks, cov, p.shape[1:])
    t = heatmap.values
    if p.shape != t.shape:
        raise ValueError(f"pred shape {p.shape} != target shape {t.shape}")
    n_c = p.shape[0]
    n_pixels = int(np.prod(p.shape[1:]))
    loss = heatmap_l2_loss(p, t, cov, cfg)
    dl_dt = 2.0 * (t - p) / (n_pixels * n_c)
    axes = tuple(range(2, d_sigma.ndim))
    g_sigma = (d_sigma * dl_dt[:, None]).sum(axis=axes) + 2.0 * cfg.alpha * cov.sigmas / n_c
    g_rot = (d_rot * dl_dt[:, None]).sum(axis=axes)
    return loss, g_sigma, g_rot


@dataclass
class NesterovSGD:
    """SGD with (optionally Nesterov) momentum over ``sigmas`` and ``rotation``.

    Uses the same update as ``torch.optim.SGD``: ``v = m * v + g`` and the
    step direction ``g + m * v`` (Nesterov) or ``v``. Sigmas are clamped to
    ``sigma_min`` after each step.
    """

    lr: float = 1e-6
    momentum: float = 0.99
    nesterov: bool = True
    sigma_min: float = 0.5
    velocity_sigma: NDArray[np.float64] | None = None
    velocity_rotation: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not self.sigma_min > 0:
            raise ValueError("sigma_min must be > 0")

    def step(self, cov: CovarianceSpec, grad_sigma: ArrayLike,
             grad_rotation: ArrayLike | None = None) -> CovarianceSpec:
        gs = np.asarray(grad_sigma, dtype=np.float64).reshape(cov.sigmas.shape)
        gr = (np.zeros_like(cov.rotation) if grad_rotation is None
              else np.asarray(grad_rotation, dtype=np.float64).reshape(cov.rotation.shape))
        if not (np.isfinite(gs).all() and np.isfinite(gr).all()):
            raise ValueError("non-finite gradient")
        vs = np.zeros_like(gs) if self.velocity_sigma is None else self.velocity_sigma
        vr = np.zeros_like(gr) if self.velocity_rotation is None else self.velocity_rotation
        vs = self.momentum * vs + gs
        vr = self.momentum * vr + gr
        ds = gs + self.momentum * vs if self.nesterov else vs
        dr = gr + self.momentum * vr if self.nesterov else vr
        sigmas = np.maximum(cov.sigmas - self.lr * ds, self.sigma_min)
        rotation = cov.rotation - self.lr * dr
        self.velocity_sigma, self.velocity_rotation = vs, vr
        return CovarianceSpec(sigmas, rotation)


def gradient_step(cov: CovarianceSpec, grads: tuple[ArrayLike, ArrayLike | None], lr: float,
                  momentum: float = 0.0, *, optimizer: NesterovSGD | None = None,
                  sigma_min: float = 0.5) -> CovarianceSpec:
    """One momentum step on ``cov``; pass ``optimizer`` to carry velocity across calls."""
    if optimizer is None:
        optimizer = NesterovSGD(lr=lr, momentum=momentum, sigma_min=sigma_min)
    grad_sigma, grad_rotation = grads
    return optimizer.step(cov, grad_sigma, grad_rotation)


@dataclass(frozen=True)
class SchedulerState:
    """Plateau-triggered sigma decay.

    ``history`` is a (C, window) buffer of recent per-landmark losses and
    ``counts`` how many entries of each row are filled. When a row is full
    and ``var(recent half) / var(older half) < threshold`` that landmark's
    sigmas shrink by ``decay`` (floored at ``sigma_min``) and its row resets.
    """

    n_landmarks: int
    window: int = 10
    decay: float = 0.9
    sigma_min: float = 0.5
    threshold: float = 0.5
    history: NDArray[np.float64] = field(default=None, repr=False)
    counts: NDArray[np.int64] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if not 0 < self.decay < 1:
            raise ValueError("decay must be in (0, 1)")
        if not self.sigma_min > 0:
            raise ValueError("sigma_min must be > 0")
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")
        if self.history is None:
            object.__setattr__(self, "history", np.zeros((self.n_landmarks, self.window)))
        if self.counts is None:
            object.__setattr__(self, "counts", np.zeros(self.n_landmarks, dtype=np.int64))

    @classmethod
    def from_config(cls, n_landmarks: int, config: dict) -> "SchedulerState":
        allowed = {"window", "decay", "sigma_min", "threshold"}
        unknown = set(config) - allowed
        if unknown:
            raise ValueError(f"unknown scheduler options: {sorted(unknown)}")
        return cls(n_landmarks, **config)


def _plateaued(history: NDArray[np.float64], threshold: float) -> NDArray[np.bool_]:
    """Row-wise plateau test on a (C, T) loss buffer."""
    half = history.shape[-1] // 2
    older = np.var(history[..., :half], axis=-1)
    recent = np.var(history[..., half:], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = recent / older
    # a perfectly flat older half only counts if the recent half is flat too
    return np.where(older == 0.0, recent == 0.0, ratio < threshold)


def adaloss_update(state: SchedulerState, losses: ArrayLike,
                   cov: CovarianceSpec) -> tuple[SchedulerState, CovarianceSpec]:
    """Record one loss per landmark; shrink sigmas of landmarks whose loss plateaued."""
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    if losses.size != state.n_landmarks:
        raise ValueError(f"expected {state.n_landmarks} losses, got {losses.size}")
    if not np.isfinite(losses).all():
        raise ValueError("non-finite loss")
    if cov.n_classes != state.n_landmarks:
        raise ValueError("covariance and scheduler disagree on the number of landmarks")
    history = np.roll(state.history, -1, axis=1)
    history[:, -1] = losses
    counts = np.minimum(state.counts + 1, state.window)
    sigmas = cov.sigmas
    hit = (counts >= state.window) & _plateaued(history, state.threshold)
    # floor at sigma_min, but never raise a sigma already below it
    decayed = np.maximum(state.decay * sigmas, np.minimum(sigmas, state.sigma_min))
    sigmas = np.where(hit[:, None], decayed, sigmas)
    counts[hit] = 0
    new_state = replace(state, history=history, counts=counts)
    return new_state, CovarianceSpec(sigmas, cov.rotation.copy())


def fit_sigma(pred: HeatmapLike, landmarks, cov: CovarianceSpec, steps: int = 5000,
              lr: float = 50.0, momentum: float = 0.9, alpha: float = 0.0,
              sigma_min: float = 0.5, learn_rotation: bool = False,
              tol: float | None = None) -> tuple[CovarianceSpec, list[float]]:
    """Fit ``cov`` so the rendered target matches a fixed ``pred`` heatmap.

    Runs ``steps`` Nesterov-SGD iterations on :func:`loss_grad_sigma`.
    Returns the fitted spec and the loss trace. ``tol`` stops early once the
    largest sigma change in a step falls below it.
    """
    opt = NesterovSGD(lr=lr, momentum=momentum, sigma_min=sigma_min)
    cfg = LossConfig(alpha)
    trace = []
    for _ in range(steps):
        loss, gs, gr = loss_grad_sigma(pred, landmarks, cov, cfg)
        trace.append(loss)
        new = opt.step(cov, gs, gr if learn_rotation else None)
        delta = np.abs(new.sigmas - cov.sigmas).max()
        cov = new
        if tol is not None and delta < tol:
            break
    return cov, trace


def render_target(landmarks, sigma: float | Sequence[float], size: Sequence[int],
                  rotation: float = 0.0) -> NDArray[np.float64]:
    """Convenience: Gaussian heatmap for (C, D) landmarks with a shared sigma."""
    coords = np.asarray(landmarks, dtype=np.float64)
    cov = CovarianceSpec.isotropic(coords.shape[0], sigma, coords.shape[-1], rotation)
    return encode(coords, cov, "gaussian", size).values
