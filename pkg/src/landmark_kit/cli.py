"""Command-line entry point: ``landmark-kit <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .adaptive import LossConfig, NesterovSGD, SchedulerState, adaloss_update, loss_grad_sigma, render_target
from .data_io import (FormatError, load_manifest, read_landmarks_csv, read_tensor, write_landmarks_csv,
                      write_npz)
from .decode import Activation, DecodeConfig, DegenerateHeatmapError, decode, decode_multi_instance
from .encode import CovarianceSpec, encode
from .geometry import LandmarkSet
from .gradcheck import run_suite
from .metrics import ReportConfig, detection_report, format_report, report_to_json
from .synth import generate, load_config

logger = logging.getLogger("landmark_kit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "LANDMARK_KIT_THREADS"
_META_KEY = "__meta__"


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def max_workers() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return min(8, os.cpu_count() or 1)
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def _write_json(path: str | None, doc: dict) -> None:
    text = json.dumps(doc, indent=2) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- subcommands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    overrides = {
        "n_samples": args.n_samples,
        "size": args.size,
        "n_classes": args.n_classes,
        "noise_std": args.noise_std,
        "n_distractors": args.distractors,
        "seed": args.seed,
    }
    try:
        cfg = load_config(args.config, overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth config: {exc}") from None
    result = generate(cfg, args.out)
    print(f"wrote {cfg.n_samples} samples, manifest {result.manifest_path}, truth {result.truth_csv}")
    return EXIT_OK


def cmd_encode(args) -> int:
    manifest = load_manifest(args.manifest)
    arrays = {}
    n_classes = len(manifest.class_names)
    cov = CovarianceSpec.isotropic(n_classes, args.sigma, manifest.spatial_dims, args.rotation)
    for sample in manifest:
        if sample.landmarks is None:
            raise FormatError(f"entry {sample.id!r} has no landmarks to encode")
        if args.size:
            size = tuple(args.size)
        elif sample.image is not None:
            size = sample.image.shape[-manifest.spatial_dims:]
        else:
            raise UsageError(f"entry {sample.id!r} has no image; pass --size")
        values = encode(sample.landmarks, cov, args.kind, size, normalize=args.normalize).values
        arrays[sample.id] = values.astype(np.float32 if args.float32 else np.float64)
    if manifest.diagnostics:
        raise FormatError("; ".join(manifest.diagnostics))
    meta = json.dumps({"class_names": list(manifest.class_names), "ids": list(arrays)}).encode()
    arrays[_META_KEY] = np.frombuffer(meta, dtype=np.uint8)
    write_npz(args.out, arrays)
    print(f"wrote {len(arrays) - 1} heatmaps to {args.out}")
    return EXIT_OK


def _heatmap_source(path: str):
    """(ids, class_names, list of (C, *S) arrays) from an NPZ or a manifest of images."""
    p = Path(path)
    if p.suffix.lower() == ".json":
        manifest = load_manifest(p)
        samples = list(manifest)
        if manifest.diagnostics:
            raise FormatError("; ".join(manifest.diagnostics))
        ids = [s.id for s in samples]
        return ids, list(manifest.class_names), [np.asarray(s.image, dtype=np.float64) for s in samples]
    data = read_tensor(p)
    if not isinstance(data, dict):
        data = {p.stem: data[None] if data.ndim == 2 else data}
    meta = data.pop(_META_KEY, None)
    ids = list(data)
    names: list[str] = []
    if meta is not None:
        info = json.loads(meta.tobytes().decode())
        names = info.get("class_names", [])
        ids = [i for i in info.get("ids", ids) if i in data]
    return ids, names, [np.asarray(data[i], dtype=np.float64) for i in ids]


def cmd_decode(args) -> int:
    ids, names, heatmaps = _heatmap_source(args.heatmaps)
    if not heatmaps:
        raise FormatError("no heatmaps found")
    act = Activation(args.activation.replace("-", "_"), args.temperature)
    cfg = DecodeConfig(args.method.replace("-", "_"), act, tuple(args.window) if len(args.window) > 1
                       else args.window[0], args.units)

    def run(item):
        sample_id, h = item
        try:
            if args.instances > 1:
                return decode_multi_instance(h, args.instances, args.min_separation, cfg)
            return decode(h, cfg)[:, None, :]
        except DegenerateHeatmapError as exc:
            label = names[exc.channel] if exc.channel is not None and exc.channel < len(names) else exc.channel
            raise NumericError(f"degenerate heatmap in {sample_id!r}, landmark {label}: {exc}") from None

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        coords = list(pool.map(run, zip(ids, heatmaps)))
    n_c = coords[0].shape[0]
    if not names or len(names) != n_c:
        names = [f"L{c}" for c in range(n_c)]
    lms = LandmarkSet(np.stack(coords), tuple(names))
    write_landmarks_csv(args.out, lms, ids)
    print(f"decoded {len(ids)} samples x {n_c} landmarks to {args.out}")
    return EXIT_OK


def _align(pred: LandmarkSet, pred_ids: list[str], truth: LandmarkSet, truth_ids: list[str]) -> np.ndarray:
    """Re-index predictions to the truth's sample and class order; absent ones become NaN."""
    n_inst = max(pred.n_instances, truth.n_instances)
    out = np.full((truth.n_samples, truth.n_classes, n_inst, truth.spatial_dims), np.nan)
    pos = {i: n for n, i in enumerate(pred_ids)}
    cls = {c: k for k, c in enumerate(pred.class_names)}
    for n, sample_id in enumerate(truth_ids):
        if sample_id not in pos:
            continue
        for c, name in enumerate(truth.class_names):
            if name in cls:
                out[n, c, : pred.n_instances] = pred.coords[pos[sample_id], cls[name]]
    return out


def cmd_evaluate(args) -> int:
    truth, truth_ids = read_landmarks_csv(args.truth)
    pred, pred_ids = read_landmarks_csv(args.pred)
    if pred.spatial_dims != truth.spatial_dims:
        raise FormatError("prediction and truth dimensionality differ")
    aligned = _align(pred, pred_ids, truth, truth_ids)
    t = np.full(aligned.shape, np.nan)
    t[:, :, : truth.n_instances] = truth.coords
    spacing = args.spacing if args.spacing else [1.0] * truth.spatial_dims
    if len(spacing) != truth.spatial_dims:
        raise UsageError(f"--spacing needs {truth.spatial_dims} values")
    try:
        cfg = ReportConfig(tuple(args.radii))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = detection_report(aligned, t, spacing, cfg, truth.class_names)
    text = report_to_json(report)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"PE mean {report['overall']['pe_mean_mm']} mm over {report['overall']['n']} landmarks -> {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        report = json.loads(Path(args.input).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid report JSON ({exc.msg})", args.input, exc.pos) from None
    if args.format == "json":
        sys.stdout.write(report_to_json(report))
    else:
        try:
            sys.stdout.write(format_report(report))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"not a detection report (missing {exc})", args.input) from None
    return EXIT_OK


def cmd_fit_sigma(args) -> int:
    config = {}
    if args.config:
        config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    settings = {
        "target_sigma": 2.0, "init_sigma": 6.0, "size": [64, 64], "steps": 5000, "lr": 50.0,
        "momentum": 0.9, "alpha": 0.0, "sigma_min": 0.5, "mode": "gradient", "tol": 0.1,
        "scheduler": {},
    }
    unknown = set(config) - set(settings)
    if unknown:
        raise UsageError(f"unknown fit-sigma options: {sorted(unknown)}")
    settings.update(config)
    for key in ("target_sigma", "init_sigma", "size", "steps", "lr", "momentum", "alpha", "mode"):
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    size = tuple(int(s) for s in settings["size"])
    center = (np.asarray(size, dtype=np.float64) - 1) / 2
    mu = center[None]
    pred = render_target(mu, settings["target_sigma"], size)
    cov = CovarianceSpec.isotropic(1, settings["init_sigma"], len(size))
    cfg = LossConfig(settings["alpha"])
    history = []
    if settings["mode"] == "gradient":
        opt = NesterovSGD(lr=settings["lr"], momentum=settings["momentum"], sigma_min=settings["sigma_min"])
        for _ in range(int(settings["steps"])):
            loss, gs, _ = loss_grad_sigma(pred, mu, cov, cfg)
            history.append(loss)
            cov = opt.step(cov, gs)
    else:
        sched_cfg = dict(settings["scheduler"])
        sched_cfg.setdefault("sigma_min", settings["sigma_min"])
        state = SchedulerState.from_config(1, sched_cfg)
        for _ in range(int(settings["steps"])):
            loss, _, _ = loss_grad_sigma(pred, mu, cov, cfg)
            history.append(loss)
            state, cov = adaloss_update(state, [loss], cov)
    final, _, _ = loss_grad_sigma(pred, mu, cov, cfg)
    if not np.isfinite(final) or not np.isfinite(cov.sigmas).all():
        raise NumericError("sigma fit diverged")
    dist = float(np.linalg.norm(cov.sigmas[0] - settings["target_sigma"]))
    doc = {
        "mode": settings["mode"],
        "steps": len(history),
        "target_sigma": settings["target_sigma"],
        "sigma": cov.sigmas[0].tolist(),
        "distance_to_target": dist,
        "initial_loss": history[0] if history else final,
        "final_loss": final,
    }
    _write_json(args.out, doc)
    if args.out:
        print(f"sigma {cov.sigmas[0].tolist()} (|sigma - target| = {dist:.3g}) after {len(history)} steps")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.configs, args.seed, args.ndim)
    worst = max(r.max_rel_error for r in results)
    for r in results:
        status = "PASS" if r.passed(args.tol) else "FAIL"
        print(f"{status} {r.name}: max relative error {r.max_rel_error:.3e} over {r.n_configs} configs")
    print(f"max relative error {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if worst < args.tol else EXIT_NUMERIC


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="landmark-kit", description="Heatmap landmark localisation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON file with SynthConfig fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-samples", type=int, help="number of images (overrides config)")
    p.add_argument("--size", type=_ints, help="image extents, e.g. 64,64 (overrides config)")
    p.add_argument("--n-classes", type=int, help="landmarks per image (overrides config)")
    p.add_argument("--noise-std", type=float, help="additive noise std (overrides config)")
    p.add_argument("--distractors", type=int, help="distractor blobs per channel (overrides config)")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode", help="render target heatmaps for a manifest")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--sigma", type=_floats, default=[3.0], help="sigma, scalar or per-dim (default 3)")
    p.add_argument("--rotation", type=_floats, default=[0.0], help="rotation angle(s) in radians (default 0)")
    p.add_argument("--kind", choices=["gaussian", "laplace", "one_hot"], default="gaussian",
                   help="heatmap distribution (default gaussian)")
    p.add_argument("--size", type=_ints, help="heatmap extents; default is each image's size")
    p.add_argument("--normalize", action="store_true", help="scale each channel to sum to 1")
    p.add_argument("--float32", action="store_true", help="store float32 instead of float64")
    p.add_argument("--out", required=True, help="output .npz")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode heatmaps into landmark coordinates")
    p.add_argument("--heatmaps", required=True, help=".npz/.npy heatmaps or a manifest whose images are heatmaps")
    p.add_argument("--method", choices=["argmax", "weighted-mean", "local-weighted-mean"],
                   default="local-weighted-mean", help="decoder (default local-weighted-mean)")
    p.add_argument("--window", type=_ints, default=[3], help="odd window extent(s) for local decoding (default 3)")
    p.add_argument("--activation", choices=["identity-normalize", "relu-normalize", "softmax"],
                   default="softmax", help="activation applied before the mean (default softmax)")
    p.add_argument("--temperature", type=float, default=1.0, help="softmax temperature (default 1)")
    p.add_argument("--units", choices=["pixels", "normalized"], default="pixels", help="output units")
    p.add_argument("--instances", type=int, default=1, help="instances per landmark class (default 1)")
    p.add_argument("--min-separation", type=float, default=3.0,
                   help="NMS radius in pixels for multi-instance decoding (default 3)")
    p.add_argument("--out", required=True, help="output landmark CSV")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="compare predicted and true landmarks")
    p.add_argument("--pred", required=True, help="predicted landmark CSV")
    p.add_argument("--truth", required=True, help="ground-truth landmark CSV")
    p.add_argument("--spacing", type=_floats, help="mm per pixel per dim (default 1 per dim)")
    p.add_argument("--radii", type=_floats, default=[1, 2, 2.5, 3, 4], help="SDR radii in mm")
    p.add_argument("--out", help="report JSON path (default stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render a detection report")
    p.add_argument("--in", dest="input", required=True, help="report JSON")
    p.add_argument("--format", choices=["text", "json"], default="text", help="output format (default text)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("fit-sigma", help="fit heatmap sigma to a fixed Gaussian prediction")
    p.add_argument("--config", help="JSON with any of the options below plus 'scheduler' settings")
    p.add_argument("--target-sigma", type=float, help="sigma of the fixed prediction (default 2)")
    p.add_argument("--init-sigma", type=float, help="initial sigma (default 6)")
    p.add_argument("--size", type=_ints, help="grid extents (default 64,64)")
    p.add_argument("--steps", type=int, help="iterations (default 5000)")
    p.add_argument("--lr", type=float, help="learning rate (default 50)")
    p.add_argument("--momentum", type=float, help="Nesterov momentum (default 0.9)")
    p.add_argument("--alpha", type=float, help="sigma regularisation weight (default 0)")
    p.add_argument("--mode", choices=["gradient", "adaloss"], help="update rule (default gradient)")
    p.add_argument("--out", help="result JSON path (default stdout)")
    p.set_defaults(func=cmd_fit_sigma)

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    p.add_argument("--configs", type=int, default=100, help="random configurations (default 100)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--ndim", type=int, choices=[2, 3], default=2, help="spatial dimensions (default 2)")
    p.add_argument("--tol", type=float, default=1e-5, help="relative error tolerance (default 1e-5)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"landmark-kit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"landmark-kit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DegenerateHeatmapError as exc:
        print(f"landmark-kit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError, ValueError, KeyError) as exc:
        print(f"landmark-kit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
