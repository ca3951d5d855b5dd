"""Heatmap decoding: argmax, weighted spatial mean and its local windowed form.

All decoders take a single-sample heatmap of shape (C, S_1, ..., S_D) and
return coordinates of shape (C, D) in (row, col[, depth]) order. The
``units`` argument selects pixel coordinates or coordinates divided by the
grid extent per axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .encode import HeatmapLike, as_values
from .geometry import SENTINEL, LandmarkSet

__all__ = [
    "Activation",
    "DecodeConfig",
    "DegenerateHeatmapError",
    "activate",
    "decode",
    "decode_argmax",
    "decode_weighted_mean",
    "decode_local_weighted_mean",
    "decode_multi_instance",
    "decode_batch",
    "weighted_mean_jacobian",
]

Units = Literal["pixels", "normalized"]
_ACTIVATIONS = ("identity_normalize", "relu_normalize", "softmax")
_METHODS = ("argmax", "weighted_mean", "local_weighted_mean")


class DegenerateHeatmapError(ValueError):
    """The activation cannot produce a probability map (e.g. all mass <= 0)."""

    def __init__(self, message: str, channel: int | None = None):
        super().__init__(message if channel is None else f"channel {channel}: {message}")
        self.channel = channel


@dataclass(frozen=True)
class Activation:
    """Maps raw heatmap values to a probability map over the grid.

    ``identity_normalize`` divides by the total and requires non-negative
    input; ``relu_normalize`` zeroes negatives first; ``softmax`` applies
    ``exp(H / temperature)`` and never degenerates.
    """

    kind: str = "softmax"
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}; expected one of {_ACTIVATIONS}")
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError("softmax temperature must be finite and > 0")


@dataclass(frozen=True)
class DecodeConfig:
    method: str = "local_weighted_mean"
    activation: Activation = field(default_factory=Activation)
    window: int | tuple[int, ...] = 3
    units: Units = "pixels"

    def __post_init__(self) -> None:
        if self.method not in _METHODS:
            raise ValueError(f"unknown decode method {self.method!r}; expected one of {_METHODS}")
        if self.units not in ("pixels", "normalized"):
            raise ValueError(f"units must be 'pixels' or 'normalized', got {self.units!r}")
        for w in np.atleast_1d(self.window):
            if w < 1 or w % 2 == 0:
                raise ValueError(f"window extents must be odd and >= 1, got {self.window}")


def activate(values: NDArray, act: Activation, axes: tuple[int, ...] | None = None) -> NDArray[np.float64]:
    """Probability map over ``axes`` (default: all axes)."""
    values = np.asarray(values, dtype=np.float64)
    if axes is None:
        axes = tuple(range(values.ndim))
    if act.kind == "softmax":
        z = values / act.temperature
        z = z - z.max(axis=axes, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axes, keepdims=True)
    if act.kind == "identity_normalize":
        if np.any(values < 0):
            raise DegenerateHeatmapError("identity_normalize needs non-negative values")
        w = values
    else:
        w = np.maximum(values, 0.0)
    total = w.sum(axis=axes, keepdims=True)
    if np.any(total <= 0):
        raise DegenerateHeatmapError(f"{act.kind} has no positive mass to normalise")
    return w / total


def _values(h: HeatmapLike) -> NDArray[np.float64]:
    values = np.asarray(as_values(h), dtype=np.float64)
    if values.ndim < 2 or values.shape[0] < 1 or min(values.shape[1:]) < 1:
        raise ValueError(f"heatmap must have shape (C, S_1, ..., S_D) with non-empty grid, got {values.shape}")
    return values


def _scale(shape: Sequence[int], units: Units) -> NDArray[np.float64]:
    if units == "pixels":
        return np.ones(len(shape))
    if units == "normalized":
        return 1.0 / np.asarray(shape, dtype=np.float64)
    raise ValueError(f"units must be 'pixels' or 'normalized', got {units!r}")


def decode_argmax(h: HeatmapLike, units: Units = "pixels", return_ties: bool = False):
    """Integer location of each channel's maximum.

    Ties resolve to the lexicographically smallest index. With
    ``return_ties=True`` also returns a (C,) bool array flagging channels
    whose maximum is not unique.
    """
    values = _values(h)
    shape = values.shape[1:]
    flat = values.reshape(values.shape[0], -1)
    idx = flat.argmax(axis=1)
    coords = np.stack(np.unravel_index(idx, shape), axis=-1).astype(np.float64) * _scale(shape, units)
    if return_ties:
        ties = (flat == flat.max(axis=1, keepdims=True)).sum(axis=1) > 1
        return coords, ties
    return coords


def _mean_in_window(values: NDArray, act: Activation, lo: Sequence[int], hi: Sequence[int],
                    channel: int) -> NDArray[np.float64]:
    window = values[tuple(slice(a, b) for a, b in zip(lo, hi))]
    try:
        p = activate(window, act)
    except DegenerateHeatmapError as exc:
        raise DegenerateHeatmapError(str(exc), channel) from None
    out = np.empty(len(lo))
    for d in range(len(lo)):
        other = tuple(k for k in range(len(lo)) if k != d)
        marginal = p.sum(axis=other) if other else p
        out[d] = marginal @ np.arange(lo[d], hi[d], dtype=np.float64)
    return out


def decode_weighted_mean(h: HeatmapLike, act: Activation = Activation(),
                         units: Units = "pixels") -> NDArray[np.float64]:
    """Expected coordinate under ``act(H)`` over the whole grid."""
    values = _values(h)
    shape = values.shape[1:]
    scale = _scale(shape, units)
    lo, hi = (0,) * len(shape), shape
    return np.stack([_mean_in_window(v, act, lo, hi, c) for c, v in enumerate(values)]) * scale


def _window_bounds(center: NDArray[np.int64], window: NDArray[np.int64], shape: Sequence[int]):
    shape = np.asarray(shape)
    if np.any(window > shape):
        raise ValueError(f"window {window.tolist()} larger than grid {shape.tolist()}")
    lo = np.clip(center - window // 2, 0, shape - window)
    return lo, lo + window


def _window_array(window: int | Sequence[int], ndim: int) -> NDArray[np.int64]:
    w = np.broadcast_to(np.asarray(window, dtype=np.int64), (ndim,)).copy()
    if np.any(w < 1) or np.any(w % 2 == 0):
        raise ValueError(f"window extents must be odd and >= 1, got {w.tolist()}")
    return w


def decode_local_weighted_mean(h: HeatmapLike, act: Activation = Activation(),
                               window: int | Sequence[int] = 3,
                               units: Units = "pixels") -> NDArray[np.float64]:
    """Weighted mean restricted to a window around each channel's argmax.

    The activation is renormalised inside the window. Near a border the
    window is shifted inward so it keeps its full extent.
    """
    values = _values(h)
    shape = values.shape[1:]
    w = _window_array(window, len(shape))
    peaks = decode_argmax(values).astype(np.int64)
    out = np.empty((values.shape[0], len(shape)))
    for c, v in enumerate(values):
        lo, hi = _window_bounds(peaks[c], w, shape)
        out[c] = _mean_in_window(v, act, lo, hi, c)
    return out * _scale(shape, units)


def _peaks(v: NDArray, k: int, min_separation: float) -> list[NDArray[np.int64]]:
    """Greedy NMS over local maxima, highest first, ties in C order."""
    if v.max() <= v.min():
        return []
    footprint = np.ones((3,) * v.ndim, dtype=bool)
    is_peak = (v >= ndimage.maximum_filter(v, footprint=footprint, mode="nearest")) & (v > v.min())
    flat_idx = np.flatnonzero(is_peak)
    order = flat_idx[np.lexsort((flat_idx, -v.ravel()[flat_idx]))]
    chosen: list[NDArray[np.int64]] = []
    for fi in order:
        p = np.array(np.unravel_index(fi, v.shape))
        if all(np.linalg.norm(p - q) > min_separation for q in chosen):
            chosen.append(p)
            if len(chosen) == k:
                break
    return chosen


def decode_multi_instance(h: HeatmapLike, k: int, min_separation: float,
                          cfg: DecodeConfig = DecodeConfig()) -> NDArray[np.float64]:
    """Up to ``k`` instances per channel, shape (C, k, D).

    Peaks are local maxima above the channel minimum, taken greedily by value;
    a peak within ``min_separation`` pixels of an accepted one is suppressed.
    Each peak is refined per ``cfg`` (argmax keeps the peak pixel, local
    weighted mean uses a window around it). Missing instances are NaN.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not min_separation >= 0:
        raise ValueError("min_separation must be >= 0")
    if cfg.method == "weighted_mean":
        raise ValueError("global weighted mean cannot separate instances; use argmax or local_weighted_mean")
    values = _values(h)
    shape = values.shape[1:]
    w = _window_array(cfg.window, len(shape))
    out = np.full((values.shape[0], k, len(shape)), SENTINEL)
    for c, v in enumerate(values):
        for i, p in enumerate(_peaks(v, k, min_separation)):
            if cfg.method == "argmax":
                out[c, i] = p
            else:
                lo, hi = _window_bounds(p, w, shape)
                out[c, i] = _mean_in_window(v, cfg.activation, lo, hi, c)
    return out * _scale(shape, cfg.units)


def decode(h: HeatmapLike, cfg: DecodeConfig = DecodeConfig()) -> NDArray[np.float64]:
    """Dispatch on ``cfg.method``; returns (C, D)."""
    if cfg.method == "argmax":
        return decode_argmax(h, cfg.units)
    if cfg.method == "weighted_mean":
        return decode_weighted_mean(h, cfg.activation, cfg.units)
    return decode_local_weighted_mean(h, cfg.activation, cfg.window, cfg.units)


def decode_batch(heatmaps, cfg: DecodeConfig = DecodeConfig(), class_names: Sequence[str] = (),
                 k: int = 1, min_separation: float = 0.0) -> LandmarkSet:
    """Decode an (N, C, *S) stack (or a list of (C, *S) heatmaps) into a LandmarkSet."""
    coords = []
    for h in heatmaps:
        if k == 1:
            coords.append(decode(h, cfg)[:, None, :])
        else:
            coords.append(decode_multi_instance(h, k, min_separation, cfg))
    return LandmarkSet(np.stack(coords), tuple(class_names))


def weighted_mean_jacobian(h: HeatmapLike, act: Activation = Activation(),
                           units: Units = "pixels") -> NDArray[np.float64]:
    """d(decoded coordinate)/d(heatmap value), shape (C, D, *S).

    With ``p = act(H)`` and ``y = sum_x x p(x)``: softmax gives
    ``p(x) (x - y) / T``; the normalising activations give
    ``(x - y) / total`` on pixels that carry mass (relu passes no gradient
    through clipped pixels).
    """
    values = _values(h)
    shape = values.shape[1:]
    d = len(shape)
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"))
    scale = _scale(shape, units)[(slice(None),) + (None,) * d]
    jac = np.empty((values.shape[0], d) + shape)
    for c, v in enumerate(values):
        p = activate(v, act)
        y = np.array([(p * grid[k]).sum() for k in range(d)])
        centred = grid - y[(slice(None),) + (None,) * d]
        if act.kind == "softmax":
            jac[c] = p * centred / act.temperature
        else:
            w = np.maximum(v, 0.0) if act.kind == "relu_normalize" else v
            gate = (v > 0) if act.kind == "relu_normalize" else np.ones_like(v, dtype=bool)
            jac[c] = centred * gate / w.sum()
    return jac * scale
