"""Point error, success detection rate (SDR) and detection reports."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .geometry import LandmarkSet, is_missing

__all__ = [
    "DEFAULT_RADII",
    "ReportConfig",
    "UndefinedMetricError",
    "point_error",
    "sdr",
    "detection_report",
    "report_to_json",
    "format_report",
]

DEFAULT_RADII = (1.0, 2.0, 2.5, 3.0, 4.0)


class UndefinedMetricError(ValueError):
    """A metric was requested over an empty set of landmarks."""


@dataclass(frozen=True)
class ReportConfig:
    radii: tuple[float, ...] = DEFAULT_RADII

    def __post_init__(self) -> None:
        radii = tuple(float(r) for r in self.radii)
        if not radii:
            raise ValueError("at least one SDR radius is required")
        if any(not (np.isfinite(r) and r > 0) for r in radii):
            raise ValueError("SDR radii must be finite and > 0")
        if list(radii) != sorted(set(radii)):
            raise ValueError("SDR radii must be strictly ascending")
        object.__setattr__(self, "radii", radii)


def _coords(lms: LandmarkSet | ArrayLike) -> NDArray[np.float64]:
    return np.asarray(lms.coords if isinstance(lms, LandmarkSet) else lms, dtype=np.float64)


def point_error(pred: LandmarkSet | ArrayLike, truth: LandmarkSet | ArrayLike,
                spacing: Sequence[float] | ArrayLike = 1.0) -> NDArray[np.float64]:
    """Euclidean error in physical units, shape ``pred.shape[:-1]``.

    ``spacing`` is per-dim (D,) or per-sample (N, D) for stacked inputs. Pairs
    where either side is missing come back as NaN.
    """
    p, t = _coords(pred), _coords(truth)
    if p.shape != t.shape:
        raise ValueError(f"pred shape {p.shape} != truth shape {t.shape}")
    d = p.shape[-1]
    sp = np.asarray(spacing, dtype=np.float64)
    if sp.ndim == 0:
        sp = np.full(d, float(sp))
    if sp.shape[-1] != d or np.any(~np.isfinite(sp)) or np.any(sp <= 0):
        raise ValueError(f"spacing must be positive with {d} entries per row, got {sp.tolist()}")
    if sp.ndim == 2:
        # per-sample spacing over (N, ..., D)
        sp = sp.reshape((sp.shape[0],) + (1,) * (p.ndim - 2) + (d,))
    err = np.sqrt((((p - t) * sp) ** 2).sum(axis=-1))
    err[is_missing(p) | is_missing(t)] = np.nan
    return err


def sdr(errors: ArrayLike, radius: float) -> float:
    """Percentage of errors ``<= radius``; NaN entries are ignored."""
    if not radius > 0:
        raise ValueError("radius must be > 0")
    e = np.asarray(errors, dtype=np.float64).ravel()
    e = e[~np.isnan(e)]
    if e.size == 0:
        raise UndefinedMetricError("SDR of an empty error set is undefined")
    return 100.0 * np.count_nonzero(e <= radius) / e.size


def _radius_key(r: float) -> str:
    return f"{r:g}"


def _summary(errors: NDArray[np.float64], cfg: ReportConfig) -> dict:
    valid = errors[~np.isnan(errors)]
    out = {
        "n": int(valid.size),
        "skipped": int(errors.size - valid.size),
        "pe_mean_mm": None,
        "pe_median_mm": None,
        "pe_std_mm": None,
        "sdr": {},
    }
    if valid.size:
        out["pe_mean_mm"] = float(valid.mean())
        out["pe_median_mm"] = float(np.median(valid))
        out["pe_std_mm"] = float(valid.std())
        out["sdr"] = {_radius_key(r): sdr(valid, r) for r in cfg.radii}
    return out


def detection_report(pred: LandmarkSet | ArrayLike, truth: LandmarkSet | ArrayLike,
                     spacing: Sequence[float] | ArrayLike = 1.0,
                     cfg: ReportConfig = ReportConfig(),
                     class_names: Sequence[str] | None = None) -> dict:
    """Per-class and pooled point-error statistics with SDR per radius.

    Errors are pooled over every sample and instance. Classes or totals with
    no evaluable landmark report ``None`` statistics and an empty ``sdr``.
    """
    errors = point_error(pred, truth, spacing)
    if errors.ndim != 3:
        raise ValueError("expected landmarks of shape (N, C, I, D)")
    if class_names is None:
        class_names = truth.class_names if isinstance(truth, LandmarkSet) else [
            f"L{c}" for c in range(errors.shape[1])]
    if len(class_names) != errors.shape[1]:
        raise ValueError("class_names length does not match the number of classes")
    classes = []
    for c, name in enumerate(class_names):
        entry = {"name": str(name)}
        entry.update(_summary(errors[:, c], cfg))
        classes.append(entry)
    overall = _summary(errors, cfg)
    return {
        "radii_mm": [float(r) for r in cfg.radii],
        "classes": classes,
        "overall": overall,
        "skipped": overall["skipped"],
    }


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, allow_nan=False) + "\n"


def format_report(report: dict) -> str:
    """Plain-text table: one row per class plus the pooled row."""
    keys = [_radius_key(r) for r in report["radii_mm"]]
    header = ["Landmark", "n", "PE (mm)"] + [f"SDR {k} mm" for k in keys]
    rows = []
    for entry in report["classes"] + [dict(report["overall"], name="overall")]:
        pe = "-" if entry["pe_mean_mm"] is None else f"{entry['pe_mean_mm']:.2f}"
        sdrs = [("-" if k not in entry["sdr"] else f"{entry['sdr'][k]:.2f}%") for k in keys]
        rows.append([entry["name"], str(entry["n"]), pe] + sdrs)
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    line = "  ".join
    out = [line(h.ljust(w) for h, w in zip(header, widths)),
           line("-" * w for w in widths)]
    out += [line(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    out.append(f"skipped: {report['skipped']}")
    return "\n".join(out) + "\n"
