"""Target heatmap generation from landmarks.

Gaussian and Laplace heatmaps are parameterised per landmark class by axis
scales ``sigmas`` (C, D) and rotation angles (C, 1) in 2-D or (C, 3) in 3-D.
The covariance is ``R @ diag(sigmas**2) @ R.T``. Heatmaps are peak
normalised (value 1 at the landmark) unless ``normalize=True``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import ndimage

from .geometry import SENTINEL, LandmarkSet, is_missing

__all__ = [
    "EncodingKind",
    "CovarianceSpec",
    "Heatmap",
    "HeatmapGenerator",
    "encode",
    "encode_grad",
    "mask_to_landmarks",
    "rotation_matrix",
    "rotation_matrix_grad",
]

EncodingKind = Literal["gaussian", "laplace", "one_hot"]
_KINDS = ("gaussian", "laplace", "one_hot")

# Mahalanobis radius past which the optional cutoff zeroes the Gaussian;
# exp(-0.5 * 6**2) ~ 1.5e-8.
CUTOFF_RADIUS = 6.0

# Rotation planes, composed left to right: R = G(p0, a0) @ G(p1, a1) @ ...
_PLANES = {2: [(0, 1)], 3: [(0, 1), (0, 2), (1, 2)]}


def n_angles(ndim: int) -> int:
    return len(_PLANES[ndim])


def _givens(ndim: int, plane: tuple[int, int], angle: NDArray, derivative: bool = False) -> NDArray:
    i, j = plane
    c, s = np.cos(angle), np.sin(angle)
    g = np.zeros(angle.shape + (ndim, ndim))
    if derivative:
        c, s = -s, c
    else:
        g[..., range(ndim), range(ndim)] = 1.0
    g[..., i, i] = c
    g[..., j, j] = c
    g[..., i, j] = -s
    g[..., j, i] = s
    return g


def rotation_matrix(angles: ArrayLike, ndim: int) -> NDArray[np.float64]:
    """Rotation matrices for angles of shape (..., n_angles)."""
    angles = np.asarray(angles, dtype=np.float64)
    r = np.broadcast_to(np.eye(ndim), angles.shape[:-1] + (ndim, ndim)).copy()
    for k, plane in enumerate(_PLANES[ndim]):
        r = r @ _givens(ndim, plane, angles[..., k])
    return r


def rotation_matrix_grad(angles: ArrayLike, ndim: int) -> NDArray[np.float64]:
    """dR/d(angle_k), shape (..., n_angles, D, D)."""
    angles = np.asarray(angles, dtype=np.float64)
    planes = _PLANES[ndim]
    out = []
    for k in range(len(planes)):
        r = np.broadcast_to(np.eye(ndim), angles.shape[:-1] + (ndim, ndim)).copy()
        for m, plane in enumerate(planes):
            r = r @ _givens(ndim, plane, angles[..., m], derivative=(m == k))
        out.append(r)
    return np.stack(out, axis=-3)


@dataclass
class CovarianceSpec:
    """Per-class heatmap shape parameters: ``sigmas`` (C, D) and ``rotation`` (C, A)."""

    sigmas: NDArray[np.float64]
    rotation: NDArray[np.float64]

    def __post_init__(self) -> None:
        self.sigmas = np.array(self.sigmas, dtype=np.float64)
        if self.sigmas.ndim != 2 or self.sigmas.shape[1] not in (2, 3):
            raise ValueError(f"sigmas must have shape (C, D) with D in (2, 3), got {self.sigmas.shape}")
        if not np.isfinite(self.sigmas).all() or np.any(self.sigmas <= 0):
            raise ValueError("sigmas must be finite and > 0")
        a = n_angles(self.ndim)
        self.rotation = np.array(self.rotation, dtype=np.float64).reshape(self.n_classes, a)
        if not np.isfinite(self.rotation).all():
            raise ValueError("rotation angles must be finite")

    @classmethod
    def isotropic(cls, n_classes: int, sigma: float | Sequence[float], ndim: int = 2,
                  rotation: float | ArrayLike = 0.0) -> "CovarianceSpec":
        """Broadcast a scalar or per-dim ``sigma`` (and rotation) to every class."""
        sigmas = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n_classes, ndim))
        rot = np.broadcast_to(np.asarray(rotation, dtype=np.float64), (n_classes, n_angles(ndim)))
        return cls(sigmas.copy(), rot.copy())

    @property
    def n_classes(self) -> int:
        return self.sigmas.shape[0]

    @property
    def ndim(self) -> int:
        return self.sigmas.shape[1]

    def rotation_matrices(self) -> NDArray[np.float64]:
        return rotation_matrix(self.rotation, self.ndim)

    def covariance(self) -> NDArray[np.float64]:
        r = self.rotation_matrices()
        return r @ (self.sigmas[..., None] ** 2 * np.swapaxes(r, -1, -2))

    def copy(self) -> "CovarianceSpec":
        return CovarianceSpec(self.sigmas.copy(), self.rotation.copy())


@dataclass
class Heatmap:
    """Dense per-class grid ``values`` of shape (C, S_1, ..., S_D)."""

    values: NDArray[np.float64]
    spacing: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim < 2:
            raise ValueError("heatmap needs a channel axis and at least one spatial axis")
        if not np.isfinite(self.values).all():
            raise ValueError("heatmap contains non-finite values")
        if self.spacing is not None:
            self.spacing = tuple(float(s) for s in self.spacing)
            if len(self.spacing) != self.spatial_dims or min(self.spacing) <= 0:
                raise ValueError(f"spacing {self.spacing} invalid for {self.spatial_dims}-D heatmap")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape[1:]

    @property
    def spatial_dims(self) -> int:
        return self.values.ndim - 1


HeatmapLike = Union[Heatmap, ArrayLike]


def as_values(h: HeatmapLike) -> NDArray:
    return h.values if isinstance(h, Heatmap) else np.asarray(h)


def _single_sample(lms: LandmarkSet | ArrayLike) -> NDArray[np.float64]:
    """Normalise landmarks to (C, I, D)."""
    if isinstance(lms, LandmarkSet):
        if lms.n_samples != 1:
            raise ValueError(f"expected a single sample, got {lms.n_samples}")
        return np.array(lms.coords[0])
    arr = np.array(lms, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, None, :]
    elif arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3:
        raise ValueError(f"landmarks must be (C, D) or (C, I, D), got shape {arr.shape}")
    return arr


def _check_inputs(coords: NDArray, cov: CovarianceSpec, size: Sequence[int]) -> tuple[int, ...]:
    size = tuple(int(s) for s in size)
    if any(s < 1 for s in size):
        raise ValueError(f"heatmap size must be >= 1 per dim, got {size}")
    if len(size) != coords.shape[-1]:
        raise ValueError(f"{len(size)}-D size for {coords.shape[-1]}-D landmarks")
    if cov.ndim != coords.shape[-1]:
        raise ValueError(f"{cov.ndim}-D covariance for {coords.shape[-1]}-D landmarks")
    if cov.n_classes != coords.shape[0]:
        raise ValueError(f"covariance has {cov.n_classes} classes, landmarks have {coords.shape[0]}")
    return size


def _grid(size: tuple[int, ...]) -> NDArray[np.float64]:
    """Pixel-center coordinates, shape (*size, D)."""
    return np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in size], indexing="ij"), axis=-1)


def _nearest_pixel(mu: NDArray) -> NDArray[np.int64]:
    # round half down: 20.5 -> 20, 20.6 -> 21
    return np.ceil(mu - 0.5).astype(np.int64)


def encode(lms: LandmarkSet | ArrayLike, cov: CovarianceSpec, kind: EncodingKind = "gaussian",
           size: Sequence[int] = (512, 512), *, normalize: bool = False,
           cutoff: bool = False) -> Heatmap:
    """Render one heatmap channel per landmark class.

    Parameters
    ----------
    lms
        Landmarks of a single sample, (C, D), (C, I, D) or a one-sample
        :class:`LandmarkSet`. Instances of a class are merged by pixelwise max.
    cov
        Shape parameters; ignored for ``one_hot``.
    kind
        ``gaussian``: ``exp(-0.5 * (x - mu)^T inv(cov) (x - mu))``.
        ``laplace``: ``exp(-|R diag(1/sigma) R^T (x - mu)|_1)``.
        ``one_hot``: 1 at the pixel nearest ``mu`` (ties to the lower index).
    size
        Grid extents. Landmarks may lie outside the grid.
    normalize
        Rescale each non-empty channel to sum to one.
    cutoff
        Zero Gaussian values beyond a Mahalanobis radius of 6.
    """
    if kind not in _KINDS:
        raise ValueError(f"unknown encoding kind {kind!r}; expected one of {_KINDS}")
    coords = _single_sample(lms)
    if kind == "one_hot":
        size = tuple(int(s) for s in size)
        if any(s < 1 for s in size) or len(size) != coords.shape[-1]:
            raise ValueError(f"invalid heatmap size {size}")
        values = _encode_one_hot(coords, size)
    else:
        size = _check_inputs(coords, cov, size)
        values = _encode_parametric(coords, cov, kind, size, cutoff)[0]
    if normalize:
        totals = values.reshape(values.shape[0], -1).sum(axis=1)
        nonzero = totals > 0
        values[nonzero] /= totals[nonzero].reshape((-1,) + (1,) * len(size))
    return Heatmap(values)


def _encode_one_hot(coords: NDArray, size: tuple[int, ...]) -> NDArray[np.float64]:
    values = np.zeros((coords.shape[0],) + size)
    missing = is_missing(coords)
    for c in range(coords.shape[0]):
        for i in range(coords.shape[1]):
            if missing[c, i]:
                continue
            idx = _nearest_pixel(coords[c, i])
            # a nearest pixel off the grid leaves the channel empty
            if np.all(idx >= 0) and np.all(idx < np.asarray(size)):
                values[(c,) + tuple(idx)] = 1.0
    return values


def _encode_parametric(coords: NDArray, cov: CovarianceSpec, kind: str, size: tuple[int, ...],
                       cutoff: bool):
    """Per-channel heatmaps plus the pieces needed for derivatives.

    Returns ``(values, winner_u)`` where ``winner_u`` is (C, *size, D): the
    rotated offsets ``R^T (x - mu)`` of the instance attaining the pixelwise max.
    """
    grid = _grid(size)
    rot = cov.rotation_matrices()
    n_c, n_i, d = coords.shape
    values = np.zeros((n_c,) + size)
    winner_u = np.zeros((n_c,) + size + (d,))
    missing = is_missing(coords)
    for c in range(n_c):
        best = np.full(size, -np.inf)
        for i in range(n_i):
            if missing[c, i]:
                continue
            u = (grid - coords[c, i]) @ rot[c]
            z = u / cov.sigmas[c]
            if kind == "gaussian":
                q = np.einsum("...d,...d->...", z, z)
                h = np.exp(-0.5 * q)
                if cutoff:
                    h[q > CUTOFF_RADIUS**2] = 0.0
            else:
                h = np.exp(-np.abs(z @ rot[c].T).sum(axis=-1))
            take = h > best
            best = np.where(take, h, best)
            winner_u[c][take] = u[take]
        values[c] = np.where(np.isfinite(best), best, 0.0)
    return values, winner_u


def encode_grad(lms: LandmarkSet | ArrayLike, cov: CovarianceSpec,
                size: Sequence[int]) -> tuple[Heatmap, NDArray[np.float64], NDArray[np.float64]]:
    """Gaussian heatmap and its analytic derivatives.

    Returns ``(heatmap, d_sigma, d_rotation)`` with ``d_sigma`` of shape
    (C, D, *size) and ``d_rotation`` of shape (C, A, *size). With several
    instances per class the derivative follows the instance that wins the max.
    """
    coords = _single_sample(lms)
    size = _check_inputs(coords, cov, size)
    values, u = _encode_parametric(coords, cov, "gaussian", size, cutoff=False)
    n_c, d = cov.n_classes, cov.ndim
    sig = cov.sigmas
    # u_d^2 / sigma_d^3 per dim -> dH/dsigma_d = H * u_d^2 / sigma_d^3
    d_sigma = np.moveaxis(u**2, -1, 1) / (sig**3)[(Ellipsis,) + (None,) * d] * values[:, None]
    # v = x - mu = R u; dH/dtheta = -H * sum_d u_d (dR^T/dtheta v)_d / sigma_d^2
    rot = cov.rotation_matrices()
    drot = rotation_matrix_grad(cov.rotation, d)
    d_rotation = np.zeros((n_c, drot.shape[1]) + size)
    for c in range(n_c):
        v = u[c] @ rot[c].T
        w = u[c] / sig[c] ** 2
        for k in range(drot.shape[1]):
            du = v @ drot[c, k]
            d_rotation[c, k] = -values[c] * np.einsum("...d,...d->...", w, du)
    return Heatmap(values), d_sigma, d_rotation


def mask_to_landmarks(mask: HeatmapLike, max_instances: int | None = None) -> LandmarkSet:
    """Centroids of the 4-/6-connected components of a binary mask.

    One instance per component, ordered by descending size and then by the
    first pixel of the component in C order. Channels without components
    are sentinel. Returns a one-sample :class:`LandmarkSet`.
    """
    values = as_values(mask)
    if values.ndim < 3:
        raise ValueError("mask must have shape (C, S_1, ..., S_D) with D >= 2")
    if not np.isin(values, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    d = values.ndim - 1
    per_channel = []
    for channel in values:
        labels, n = ndimage.label(channel.astype(bool))
        comps = []
        if n:
            flat = labels.ravel()
            sizes = np.bincount(flat, minlength=n + 1)
            # first flat index of each label
            first = np.full(n + 1, flat.size)
            np.minimum.at(first, flat, np.arange(flat.size))
            centroids = ndimage.center_of_mass(np.ones_like(labels), labels, range(1, n + 1))
            order = sorted(range(1, n + 1), key=lambda k: (-sizes[k], first[k]))
            comps = [np.asarray(centroids[k - 1], dtype=np.float64) for k in order]
        per_channel.append(comps)
    n_inst = max([len(c) for c in per_channel] + [1])
    if max_instances is not None:
        n_inst = max_instances
    coords = np.full((1, len(per_channel), n_inst, d), SENTINEL)
    for c, comps in enumerate(per_channel):
        for i, centroid in enumerate(comps[:n_inst]):
            coords[0, c, i] = centroid
    return LandmarkSet(coords)


class HeatmapGenerator:
    """Stateful generator holding learnable ``sigmas`` and ``rotation``.

    Mirrors the usual training-loop usage: construct once, call on a batch of
    landmarks (N, C, [I,] D), and let an optimiser or scheduler mutate
    ``cov`` between calls.
    """

    def __init__(self, nb_landmarks: int, sigmas: float | ArrayLike = 3.0,
                 rotation: float | ArrayLike = 0.0, heatmap_size: Sequence[int] = (512, 512),
                 kind: EncodingKind = "gaussian", learnable: bool = False,
                 normalize: bool = False):
        ndim = len(heatmap_size)
        sig = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (nb_landmarks, ndim)).copy()
        rot = np.broadcast_to(np.asarray(rotation, dtype=np.float64), (nb_landmarks, n_angles(ndim))).copy()
        self.cov = CovarianceSpec(sig, rot)
        self.heatmap_size = tuple(int(s) for s in heatmap_size)
        self.kind = kind
        self.learnable = learnable
        self.normalize = normalize

    @property
    def sigmas(self) -> NDArray[np.float64]:
        return self.cov.sigmas

    @property
    def rotation(self) -> NDArray[np.float64]:
        return self.cov.rotation

    def __call__(self, landmarks: LandmarkSet | ArrayLike) -> NDArray[np.float64]:
        if isinstance(landmarks, LandmarkSet):
            batch = landmarks.coords
        else:
            batch = np.asarray(landmarks, dtype=np.float64)
            if batch.ndim == 3:
                batch = batch[:, :, None, :]
        return np.stack([
            encode(sample, self.cov, self.kind, self.heatmap_size, normalize=self.normalize).values
            for sample in batch
        ])
