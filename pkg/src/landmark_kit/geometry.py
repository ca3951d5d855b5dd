"""Landmark containers, affine transforms and patch/ROI coordinate remapping.

Coordinates are continuous and follow array index order (row, col[, depth]).
An integer value ``k`` is the center of pixel ``k``, so a pixel spans
``[k - 0.5, k + 0.5)``. Missing landmarks are stored as NaN.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, TypeVar, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

__all__ = [
    "SENTINEL",
    "LandmarkSet",
    "AffineTransform",
    "PatchSpec",
    "SingularTransformError",
    "apply_affine",
    "compose",
    "invert",
    "identity",
    "translation",
    "scaling",
    "rotation",
    "flip",
    "crop_roi",
    "patch_to_global",
    "global_to_patch",
    "is_missing",
]

SENTINEL = np.nan


class SingularTransformError(ValueError):
    """Raised when an affine transform cannot be inverted."""


def is_missing(coords: ArrayLike) -> NDArray[np.bool_]:
    """Mask over the leading axes marking sentinel (missing) landmarks."""
    coords = np.asarray(coords, dtype=float)
    return ~np.isfinite(coords).all(axis=-1)


@dataclass(frozen=True)
class LandmarkSet:
    """Landmark coordinates of shape (N, C, I, D).

    ``N`` samples, ``C`` classes, ``I`` instances per class and ``D`` spatial
    dimensions (2 or 3). Partially finite entries are normalised to the full
    sentinel on construction so an entry is either present or absent.
    """

    coords: NDArray[np.float64]
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 4:
            raise ValueError(f"coords must have shape (N, C, I, D), got {coords.shape}")
        if coords.shape[-1] not in (2, 3):
            raise ValueError(f"spatial dimension must be 2 or 3, got {coords.shape[-1]}")
        if coords.shape[2] < 1:
            raise ValueError("at least one instance per class is required")
        coords[is_missing(coords)] = SENTINEL
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        names = tuple(str(n) for n in self.class_names)
        if not names:
            names = tuple(f"L{c}" for c in range(coords.shape[1]))
        if len(names) != coords.shape[1]:
            raise ValueError(f"{len(names)} class names given for {coords.shape[1]} classes")
        object.__setattr__(self, "class_names", names)

    @classmethod
    def from_array(cls, coords: ArrayLike, class_names: Sequence[str] = ()) -> "LandmarkSet":
        """Build from (N, C, D), (N, C, I, D) or a single-sample (C, D) array."""
        arr = np.asarray(coords, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, :, None, :]
        elif arr.ndim == 3:
            arr = arr[:, :, None, :]
        return cls(arr, tuple(class_names))

    @property
    def n_samples(self) -> int:
        return self.coords.shape[0]

    @property
    def n_classes(self) -> int:
        return self.coords.shape[1]

    @property
    def n_instances(self) -> int:
        return self.coords.shape[2]

    @property
    def spatial_dims(self) -> int:
        return self.coords.shape[3]

    @property
    def missing(self) -> NDArray[np.bool_]:
        return is_missing(self.coords)

    def with_coords(self, coords: ArrayLike) -> "LandmarkSet":
        return LandmarkSet(np.asarray(coords, dtype=np.float64), self.class_names)


Coords = TypeVar("Coords", LandmarkSet, np.ndarray)
CoordsLike = Union[LandmarkSet, ArrayLike]


def _unwrap(lms: CoordsLike) -> tuple[NDArray[np.float64], LandmarkSet | None]:
    if isinstance(lms, LandmarkSet):
        return np.array(lms.coords), lms
    return np.array(lms, dtype=np.float64), None


def _rewrap(coords: NDArray[np.float64], template: LandmarkSet | None):
    if template is None:
        return coords
    return template.with_coords(coords)


@dataclass(frozen=True)
class AffineTransform:
    """Homogeneous (D+1)x(D+1) affine matrix acting on landmark coordinates."""

    matrix: NDArray[np.float64]

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] not in (3, 4):
            raise ValueError(f"affine matrix must be 3x3 or 4x4, got shape {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("affine matrix contains non-finite values")
        expected = np.zeros(m.shape[0])
        expected[-1] = 1.0
        if not np.array_equal(m[-1], expected):
            raise ValueError(f"last row of an affine matrix must be {expected.tolist()}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def ndim(self) -> int:
        return self.matrix.shape[0] - 1

    @property
    def linear(self) -> NDArray[np.float64]:
        return self.matrix[:-1, :-1]

    @property
    def offset(self) -> NDArray[np.float64]:
        return self.matrix[:-1, -1]

    @classmethod
    def from_parts(cls, linear: ArrayLike, offset: ArrayLike) -> "AffineTransform":
        linear = np.asarray(linear, dtype=np.float64)
        d = linear.shape[0]
        m = np.eye(d + 1)
        m[:d, :d] = linear
        m[:d, d] = np.asarray(offset, dtype=np.float64)
        return cls(m)

    def __matmul__(self, other: "AffineTransform") -> "AffineTransform":
        return compose(self, other)

    def to_list(self) -> list[list[float]]:
        return self.matrix.tolist()


def _check_dims(a: AffineTransform, b: AffineTransform) -> None:
    if a.ndim != b.ndim:
        raise ValueError(f"dimension mismatch: {a.ndim}-D and {b.ndim}-D transforms")


def apply_affine(lms: Coords, t: AffineTransform) -> Coords:
    """Map every present landmark ``y`` to ``linear(t) @ y + offset(t)``.

    Accepts a :class:`LandmarkSet` or any array whose last axis is the spatial
    dimension, and returns the same kind. Sentinels stay sentinels.
    """
    coords, template = _unwrap(lms)
    if coords.shape[-1] != t.ndim:
        raise ValueError(f"{t.ndim}-D transform applied to {coords.shape[-1]}-D landmarks")
    out = coords @ t.linear.T + t.offset
    out[is_missing(coords)] = SENTINEL
    return _rewrap(out, template)


def compose(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """Transform equivalent to applying ``b`` first and then ``a``."""
    _check_dims(a, b)
    m = a.matrix @ b.matrix
    m[-1] = 0.0
    m[-1, -1] = 1.0
    return AffineTransform(m)


def invert(t: AffineTransform) -> AffineTransform:
    lin = t.linear
    scale = np.abs(lin).max()
    if scale == 0.0 or abs(np.linalg.det(lin / scale)) < 1e-12:
        raise SingularTransformError("affine transform has a singular linear block")
    inv = np.linalg.inv(lin)
    return AffineTransform.from_parts(inv, -inv @ t.offset)


def identity(ndim: int = 2) -> AffineTransform:
    return AffineTransform(np.eye(ndim + 1))


def translation(offset: Sequence[float]) -> AffineTransform:
    offset = np.asarray(offset, dtype=np.float64)
    return AffineTransform.from_parts(np.eye(offset.size), offset)


def scaling(factors: Sequence[float], center: Sequence[float] | None = None) -> AffineTransform:
    """Per-axis scaling, optionally about ``center`` instead of the origin."""
    factors = np.asarray(factors, dtype=np.float64)
    center = np.zeros(factors.size) if center is None else np.asarray(center, dtype=np.float64)
    lin = np.diag(factors)
    return AffineTransform.from_parts(lin, center - lin @ center)


def rotation(angle: float, center: Sequence[float] = (0.0, 0.0)) -> AffineTransform:
    """2-D rotation about ``center`` in (row, col) coordinates.

    The linear block is ``[[cos, sin], [-sin, cos]]``; with rows pointing down
    a positive angle turns the image clockwise on screen, e.g. a quarter turn
    about the center of a 4x4 grid sends pixel (0, 0) to (0, 3).
    """
    c, s = np.cos(angle), np.sin(angle)
    lin = np.array([[c, s], [-s, c]])
    center = np.asarray(center, dtype=np.float64)
    return AffineTransform.from_parts(lin, center - lin @ center)


def flip(axis: int, size: Sequence[int]) -> AffineTransform:
    """Mirror along ``axis`` of an image with extents ``size``: x -> (S - 1) - x."""
    size = np.asarray(size, dtype=np.float64)
    lin = np.eye(size.size)
    lin[axis, axis] = -1.0
    offset = np.zeros(size.size)
    offset[axis] = size[axis] - 1.0
    return AffineTransform.from_parts(lin, offset)


@dataclass(frozen=True)
class PatchSpec:
    """Integer-aligned sub-window of a parent image."""

    origin: tuple[int, ...]
    size: tuple[int, ...]
    parent_size: tuple[int, ...]

    def __post_init__(self) -> None:
        origin = tuple(int(v) for v in self.origin)
        size = tuple(int(v) for v in self.size)
        parent = tuple(int(v) for v in self.parent_size)
        if not (len(origin) == len(size) == len(parent)):
            raise ValueError("origin, size and parent_size must have the same length")
        for o, s, p in zip(origin, size, parent):
            if s < 1 or o < 0 or o + s > p:
                raise ValueError(f"patch origin={origin} size={size} does not fit in {parent}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "parent_size", parent)

    @property
    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "size": list(self.size), "parent_size": list(self.parent_size)}


def crop_roi(parent_size: Sequence[int], center: Sequence[float], size: Sequence[int]) -> PatchSpec:
    """Patch of exactly ``size`` centered as close to ``center`` as the borders allow.

    The origin is ``round(center - size / 2)`` (halves round up), then clamped
    to ``[0, parent - size]``; the patch is shifted, never shrunk.
    """
    parent = np.asarray(parent_size, dtype=np.int64)
    size_arr = np.asarray(size, dtype=np.int64)
    center_arr = np.asarray(center, dtype=np.float64)
    if not (parent.shape == size_arr.shape == center_arr.shape):
        raise ValueError("parent_size, center and size must have the same length")
    if np.any(size_arr < 1) or np.any(size_arr > parent):
        raise ValueError(f"patch size {size_arr.tolist()} does not fit in {parent.tolist()}")
    if not np.isfinite(center_arr).all():
        raise ValueError("ROI center must be finite")
    origin = np.floor(center_arr - size_arr / 2.0 + 0.5).astype(np.int64)
    origin = np.clip(origin, 0, parent - size_arr)
    return PatchSpec(tuple(origin.tolist()), tuple(size_arr.tolist()), tuple(parent.tolist()))


def _shift(lms: Coords, offset: NDArray[np.float64]) -> Coords:
    coords, template = _unwrap(lms)
    if coords.shape[-1] != offset.size:
        raise ValueError(f"{offset.size}-D patch used with {coords.shape[-1]}-D landmarks")
    out = coords + offset
    out[is_missing(coords)] = SENTINEL
    return _rewrap(out, template)


def patch_to_global(lms: Coords, patch: PatchSpec) -> Coords:
    """Patch-local pixel coordinates to parent-image coordinates."""
    return _shift(lms, np.asarray(patch.origin, dtype=np.float64))


def global_to_patch(lms: Coords, patch: PatchSpec) -> Coords:
    return _shift(lms, -np.asarray(patch.origin, dtype=np.float64))
