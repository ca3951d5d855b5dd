"""Synthetic landmark images with known ground truth.

Each sample is a (C, *size) float64 image whose channel ``c`` holds an
isotropic Gaussian blob at the class-``c`` landmark, optional distractor
blobs, and additive Gaussian noise, clipped to [0, 1]. With no noise or
distractors a channel is exactly the target heatmap of its landmark, so the
identity map can stand in for a trained model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .data_io import write_landmarks_csv, write_manifest, write_tensor
from .encode import CovarianceSpec, encode
from .geometry import LandmarkSet

__all__ = ["SynthConfig", "SynthResult", "render_sample", "generate", "load_config"]

MARGIN_SIGMAS = 6.0
DISTRACTOR_SEPARATION_SIGMAS = 10.0
_MAX_PLACEMENT_TRIES = 1000


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 8
    size: tuple[int, ...] = (64, 64)
    n_classes: int = 3
    sigma_range: tuple[float, float] = (2.0, 3.0)
    noise_std: float = 0.0
    n_distractors: int = 0
    distractor_amplitude: float = 0.4
    spacing: tuple[float, ...] | None = None  # 0.1 per axis when omitted
    seed: int = 0

    def __post_init__(self) -> None:
        size = tuple(int(s) for s in self.size)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "sigma_range", tuple(float(s) for s in self.sigma_range))
        spacing = (0.1,) * len(size) if self.spacing is None else self.spacing
        object.__setattr__(self, "spacing", tuple(float(s) for s in spacing))
        if len(size) not in (2, 3) or min(size) < 16:
            raise ValueError(f"size must be 2-D or 3-D with every extent >= 16, got {size}")
        if len(self.spacing) != len(size) or min(self.spacing) <= 0:
            raise ValueError("spacing must be positive with one value per dimension")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ValueError(f"sigma_range must satisfy 0 < lo <= hi, got {self.sigma_range}")
        if self.n_samples < 1 or self.n_classes < 1:
            raise ValueError("n_samples and n_classes must be >= 1")
        if self.noise_std < 0 or self.n_distractors < 0:
            raise ValueError("noise_std and n_distractors must be >= 0")
        if min(size) <= 2 * MARGIN_SIGMAS * hi:
            raise ValueError(f"size {size} too small for a {MARGIN_SIGMAS:g}-sigma margin at sigma={hi}")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown synth options: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class SynthResult:
    manifest_path: Path
    truth_csv: Path
    landmarks: LandmarkSet
    sigmas: NDArray[np.float64]
    image_ids: list[str]


def _place_distractor(rng: np.random.Generator, center: NDArray, sigma: float,
                      size: tuple[int, ...]) -> NDArray[np.float64]:
    lo = np.zeros(len(size))
    hi = np.asarray(size, dtype=np.float64) - 1
    for _ in range(_MAX_PLACEMENT_TRIES):
        p = rng.uniform(lo, hi)
        if np.linalg.norm(p - center) >= DISTRACTOR_SEPARATION_SIGMAS * sigma:
            return p
    raise ValueError(f"cannot place a distractor {DISTRACTOR_SEPARATION_SIGMAS:g} sigma from the landmark in {size}")


def render_sample(cfg: SynthConfig, index: int) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
    """Image (C, *size), landmarks (C, D) and blob sigmas (C,) for sample ``index``."""
    rng = np.random.default_rng(cfg.seed + index)
    size, d = cfg.size, len(cfg.size)
    sigmas = rng.uniform(*cfg.sigma_range, size=cfg.n_classes)
    margin = MARGIN_SIGMAS * sigmas[:, None]
    landmarks = rng.uniform(margin, np.asarray(size) - 1 - margin)
    cov = CovarianceSpec.isotropic(cfg.n_classes, 1.0, d)
    cov.sigmas[:] = sigmas[:, None]
    image = encode(landmarks, cov, "gaussian", size).values
    for c in range(cfg.n_classes):
        for _ in range(cfg.n_distractors):
            p = _place_distractor(rng, landmarks[c], sigmas[c], size)
            one = CovarianceSpec.isotropic(1, sigmas[c], d)
            image[c] += cfg.distractor_amplitude * encode(p[None], one, "gaussian", size).values[0]
    if cfg.noise_std > 0:
        image += rng.normal(0.0, cfg.noise_std, size=image.shape)
    return np.clip(image, 0.0, 1.0), landmarks, sigmas


def generate(cfg: SynthConfig, out_dir: str | Path) -> SynthResult:
    """Write images, ``truth.csv`` and ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    names = [f"L{c}" for c in range(cfg.n_classes)]
    ids, coords, sigmas, entries = [], [], [], []
    for n in range(cfg.n_samples):
        image, lms, sig = render_sample(cfg, n)
        sample_id = f"sample_{n:04d}"
        rel = f"images/{sample_id}.npy"
        write_tensor(out / rel, image)
        ids.append(sample_id)
        coords.append(lms)
        sigmas.append(sig)
        entries.append({
            "id": sample_id,
            "image": rel,
            "spacing": list(cfg.spacing),
            "landmarks": [[p.tolist()] for p in lms],
            "blob_sigmas": sig.tolist(),
        })
    landmarks = LandmarkSet.from_array(np.stack(coords), names)
    truth = out / "truth.csv"
    write_landmarks_csv(truth, landmarks, ids)
    manifest = out / "manifest.json"
    write_manifest(manifest, {
        "kind": "landmark",
        "spatial_dims": len(cfg.size),
        "class_names": names,
        "synth_config": cfg.to_dict(),
        "entries": entries,
    })
    return SynthResult(manifest, truth, landmarks, np.stack(sigmas), ids)


def load_config(path: str | Path, overrides: dict | None = None) -> SynthConfig:
    data = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return SynthConfig.from_dict(data)
