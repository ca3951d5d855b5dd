"""Central finite-difference checks of the analytic heatmap and loss gradients.

Relative error is measured normwise: ``max|analytic - fd| / max|fd|`` over
every pixel of one parameter's derivative map (heatmap) or over the whole
gradient vector of one parameter group (loss).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adaptive import LossConfig, heatmap_l2_loss, loss_grad_sigma
from .encode import CovarianceSpec, encode, encode_grad

__all__ = ["GradcheckResult", "random_config", "check_encode_grad", "check_loss_grad", "run_suite"]

SIGMA_STEP = 1e-4  # relative to sigma
ANGLE_STEP = 1e-4  # radians


@dataclass
class GradcheckResult:
    name: str
    n_configs: int
    max_rel_error: float

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol


def _rel(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = np.abs(fd).max()
    err = np.abs(analytic - fd).max()
    return float(err / scale) if scale > 0 else float(err)


def random_config(rng: np.random.Generator, ndim: int = 2, n_classes: int = 2,
                  size: tuple[int, ...] | None = None):
    """Anisotropic sigmas, arbitrary rotations and sub-pixel centers well inside the grid."""
    if size is None:
        size = (32, 36) if ndim == 2 else (18, 20, 22)
    sigmas = rng.uniform(1.5, 4.0, size=(n_classes, ndim))
    n_ang = 1 if ndim == 2 else 3
    rotation = rng.uniform(-np.pi, np.pi, size=(n_classes, n_ang))
    lo = np.full(ndim, 5.0)
    hi = np.asarray(size, dtype=np.float64) - 6.0
    mu = rng.uniform(lo, hi, size=(n_classes, ndim))
    return mu, CovarianceSpec(sigmas, rotation), size


def _perturbed(cov: CovarianceSpec, group: str, c: int, k: int, step: float) -> CovarianceSpec:
    out = cov.copy()
    getattr(out, group)[c, k] += step
    return out


def check_encode_grad(mu, cov: CovarianceSpec, size) -> float:
    _, d_sigma, d_rot = encode_grad(mu, cov, size)
    worst = 0.0
    for group, analytic in (("sigmas", d_sigma), ("rotation", d_rot)):
        for c in range(cov.n_classes):
            for k in range(analytic.shape[1]):
                h = SIGMA_STEP * cov.sigmas[c, k] if group == "sigmas" else ANGLE_STEP
                plus = encode(mu, _perturbed(cov, group, c, k, h), "gaussian", size).values[c]
                minus = encode(mu, _perturbed(cov, group, c, k, -h), "gaussian", size).values[c]
                worst = max(worst, _rel(analytic[c, k], (plus - minus) / (2 * h)))
    return worst


def check_loss_grad(pred, mu, cov: CovarianceSpec, cfg: LossConfig) -> float:
    size = np.asarray(pred).shape[1:]
    _, g_sigma, g_rot = loss_grad_sigma(pred, mu, cov, cfg)

    def loss_at(c: CovarianceSpec) -> float:
        return heatmap_l2_loss(pred, encode(mu, c, "gaussian", size), c, cfg)

    worst = 0.0
    for group, analytic in (("sigmas", g_sigma), ("rotation", g_rot)):
        fd = np.zeros_like(analytic)
        for c in range(cov.n_classes):
            for k in range(analytic.shape[1]):
                h = SIGMA_STEP * cov.sigmas[c, k] if group == "sigmas" else ANGLE_STEP
                fd[c, k] = (loss_at(_perturbed(cov, group, c, k, h))
                            - loss_at(_perturbed(cov, group, c, k, -h))) / (2 * h)
        worst = max(worst, _rel(analytic, fd))
    return worst


def _random_pred(rng: np.random.Generator, mu, cov: CovarianceSpec, size) -> np.ndarray:
    """Gaussian heatmap with perturbed parameters plus noise, so the data term is active."""
    other = CovarianceSpec(cov.sigmas * rng.uniform(0.6, 1.4, cov.sigmas.shape),
                           cov.rotation + rng.normal(0, 0.3, cov.rotation.shape))
    shifted = mu + rng.normal(0, 0.7, np.shape(mu))
    pred = encode(shifted, other, "gaussian", size).values
    return pred + rng.normal(0, 0.05, pred.shape)


def run_suite(n_configs: int = 100, seed: int = 0, ndim: int = 2) -> list[GradcheckResult]:
    rng = np.random.default_rng(seed)
    enc_worst = loss_worst = 0.0
    for _ in range(n_configs):
        mu, cov, size = random_config(rng, ndim)
        enc_worst = max(enc_worst, check_encode_grad(mu, cov, size))
        pred = _random_pred(rng, mu, cov, size)
        cfg = LossConfig(alpha=float(rng.uniform(0.0, 5.0)))
        loss_worst = max(loss_worst, check_loss_grad(pred, mu, cov, cfg))
    return [GradcheckResult("encode_grad", n_configs, enc_worst),
            GradcheckResult("loss_grad_sigma", n_configs, loss_worst)]
