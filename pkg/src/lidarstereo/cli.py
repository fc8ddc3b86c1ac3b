"""Command-line entry points: generate / train / infer / eval / gradcheck / ablate.

Every subcommand writes all artifacts plus a ``manifest.json`` under its
``--out`` directory. The manifest records the fully resolved configuration,
so replaying a run with ``--config manifest.json`` reproduces the artifacts
bit-identically. Flags mirror config field names; a ``--config`` JSON file
overrides defaults and explicit flags override the file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields as dc_fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import ndgrad as ng
from .losses import DegenerateMaskError, ssim
from .model import ModelConfig, StereoModel
from .refine import SparseDisparity, cspn_propagate, normalize_affinity
from .correlation import LookupConfig, build_correlation, build_pyramid, lookup
from .scenegen import (ParseError, SceneConfig, SceneConfigError,
                       generate_scene, read_pfm, read_ppm, read_sparse_csv,
                       sample_lidar, write_pfm, write_ppm, write_sparse_csv)
from .traineval import (TrainConfig, TrainingDiverged, ablate_iterations,
                        compute_metrics, evaluate, train, write_ablation_csv,
                        write_curve_csv)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse with the documented usage-error exit code (1, not 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _field_types(cls):
    return {f.name: f.type for f in dc_fields(cls)}


def _add_config_flags(parser, section, cls):
    """One flag per dataclass field, defaulting to None (= not given)."""
    for f in dc_fields(cls):
        if f.name in ("scene", "model", "weights", "seed"):
            continue  # nested sections / globally-shared flags
        dest = f"{section}_{f.name}"
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            group = parser.add_mutually_exclusive_group()
            group.add_argument(flag, dest=dest, action="store_const",
                               const=True, default=None)
            group.add_argument("--no-" + f.name.replace("_", "-"), dest=dest,
                               action="store_const", const=False)
        else:
            typ = float if f.type in ("float", float) else int
            if f.name == "strategy":
                parser.add_argument(flag, dest=dest, default=None,
                                    choices=["supervised", "self-all-in",
                                             "self-half1", "self-half2"])
            else:
                parser.add_argument(flag, dest=dest, type=typ, default=None)


def _load_config_file(path):
    """Read a JSON config; a manifest is accepted via its "config" key."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})")
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    if "subcommand" in raw and "config" in raw:
        seed = raw.get("seed")
        raw = dict(raw["config"])
        raw.setdefault("seed", seed)
    return raw


def _resolve_section(args, file_cfg, section, cls):
    """defaults <- config file <- explicit flags, then build the dataclass."""
    known = _field_types(cls)
    values = {}
    for key, val in (file_cfg.get(section) or {}).items():
        if key not in known:
            raise ParseError(f"unknown {section} config key {key!r}")
        values[key] = val
    for name in known:
        flag_val = getattr(args, f"{section}_{name}", None)
        if flag_val is not None:
            values[name] = flag_val
    return cls(**values)


def _file_cfg(args):
    return _load_config_file(args.config) if args.config else {}


def _setting(args, file_cfg, name, default, required=False):
    """Top-level setting: explicit flag, else config file, else default."""
    value = getattr(args, name, None)
    if value is None:
        value = file_cfg.get(name, default)
    if required and value is None:
        raise ParseError(f"missing required setting --{name.replace('_', '-')}")
    return value


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out, subcommand, config, seed, artifacts, extra=None):
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "artifacts": sorted(artifacts),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _jobs(args):
    return args.jobs if args.jobs else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# colormap


_TURBO_R = (0.13572138, 4.61539260, -42.66032258, 132.13108234,
            -152.94239396, 59.28637943)
_TURBO_G = (0.09140261, 2.19418839, 4.84296658, -14.18503333,
            4.27729857, 2.82956604)
_TURBO_B = (0.10667330, 12.64194608, -60.58204836, 110.36276771,
            -89.90310912, 27.34824973)


def turbo_colormap(x):
    """Map values in [0,1] to a turbo-style RGB image (polynomial fit)."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    channels = []
    for coeffs in (_TURBO_R, _TURBO_G, _TURBO_B):
        y = np.zeros_like(x)
        for c in reversed(coeffs):
            y = y * x + c
        channels.append(np.clip(y, 0.0, 1.0))
    return np.stack(channels)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    file_cfg = _file_cfg(args)
    scene = _resolve_section(args, file_cfg, "scene", SceneConfig)
    seed = _setting(args, file_cfg, "seed", 0)
    count = _setting(args, file_cfg, "count", 1)
    points = _setting(args, file_cfg, "points", 500)
    out = _out_dir(args)
    artifacts = []

    def emit(k):
        sample = generate_scene(scene, seed=seed + k)
        sparse = sample_lidar(sample, points, seed=seed + k + 500_000)
        sub = out / f"scene{k:03d}"
        sub.mkdir(exist_ok=True)
        write_ppm(sub / "left.ppm", sample.image_left)
        write_ppm(sub / "right.ppm", sample.image_right)
        write_pfm(sub / "gt.pfm", sample.gt_disparity)
        write_pfm(sub / "valid.pfm", sample.gt_valid.astype(np.float64))
        write_sparse_csv(sub / "sparse.csv", sparse)
        return [f"scene{k:03d}/{n}" for n in
                ("left.ppm", "right.ppm", "gt.pfm", "valid.pfm", "sparse.csv")]

    with ThreadPoolExecutor(max_workers=_jobs(args)) as pool:
        for names in pool.map(emit, range(count)):
            artifacts.extend(names)
    config = {"scene": asdict(scene), "count": count, "points": points}
    _write_manifest(out, "generate", config, seed, artifacts)
    print(f"wrote {count} scenes to {out}")
    return EXIT_OK


def cmd_train(args):
    file_cfg = _file_cfg(args)
    scene = _resolve_section(args, file_cfg, "scene", SceneConfig)
    model_cfg = _resolve_section(args, file_cfg, "model", ModelConfig)
    train_cfg = _resolve_section(args, file_cfg, "train", TrainConfig)
    train_cfg.scene, train_cfg.model = scene, model_cfg
    train_cfg.seed = _setting(args, file_cfg, "seed", 0)
    out = _out_dir(args)
    result = train(train_cfg, progress=lambda row: print(
        f"step {row['step']:5d}  loss {row['loss']:.4f}  epe {row['epe']:.3f}"))
    result.model.save(out / "model.bin")
    write_curve_csv(out / "curve.csv", result.curve)
    config = {"scene": asdict(scene), "model": model_cfg.to_dict(),
              "train": {k: v for k, v in asdict(train_cfg).items()
                        if k not in ("scene", "model", "weights")}}
    _write_manifest(out, "train", config, train_cfg.seed,
                    ["model.bin", "model.json", "curve.csv"])
    return EXIT_OK


def cmd_infer(args):
    file_cfg = _file_cfg(args)
    model_cfg = _resolve_section(args, file_cfg, "model", ModelConfig)
    left = _setting(args, file_cfg, "left", None, required=True)
    right = _setting(args, file_cfg, "right", None, required=True)
    checkpoint = _setting(args, file_cfg, "checkpoint", None, required=True)
    sparse_path = _setting(args, file_cfg, "sparse", None)
    color = _setting(args, file_cfg, "color", False)
    out = _out_dir(args)
    image_l = read_ppm(left)
    image_r = read_ppm(right)
    if image_l.shape != image_r.shape:
        raise ParseError(f"image shapes disagree: {image_l.shape} vs "
                         f"{image_r.shape}")
    shape = image_l.shape[1:]
    sparse = read_sparse_csv(sparse_path, shape) if sparse_path else None
    try:
        model = StereoModel.load(checkpoint, config=model_cfg)
    except ValueError as exc:
        raise ParseError(f"{checkpoint}: {exc}")
    pred = model.predict(image_l, image_r, sparse)
    if not np.all(np.isfinite(pred)):
        print("error: non-finite disparities predicted", file=sys.stderr)
        return EXIT_NUMERIC
    write_pfm(out / "disparity.pfm", pred)
    artifacts = ["disparity.pfm"]
    extra = None
    if color:
        lo, hi = float(pred.min()), float(pred.max())
        scale = (pred - lo) / (hi - lo) if hi > lo else np.zeros_like(pred)
        write_ppm(out / "disparity.ppm", turbo_colormap(scale))
        artifacts.append("disparity.ppm")
        extra = {"colormap": {"min": lo, "max": hi}}
    config = {"model": model_cfg.to_dict(), "left": str(left),
              "right": str(right),
              "sparse": str(sparse_path) if sparse_path else None,
              "checkpoint": str(checkpoint), "color": bool(color)}
    _write_manifest(out, "infer", config, 0, artifacts, extra=extra)
    return EXIT_OK


def cmd_eval(args):
    file_cfg = _file_cfg(args)
    pred_path = _setting(args, file_cfg, "pred", None, required=True)
    gt_path = _setting(args, file_cfg, "gt", None, required=True)
    valid_path = _setting(args, file_cfg, "valid", None)
    focal = _setting(args, file_cfg, "focal", 100.0)
    baseline = _setting(args, file_cfg, "baseline", 0.5)
    out = _out_dir(args)
    pred = read_pfm(pred_path)
    gt = read_pfm(gt_path)
    if valid_path:
        valid = read_pfm(valid_path) > 0.5
    else:
        valid = gt > 0.0
    report = compute_metrics(pred, gt, valid, focal, baseline)
    if not all(np.isfinite(v) for v in report.as_dict().values()):
        print("error: non-finite metrics", file=sys.stderr)
        return EXIT_NUMERIC
    (out / "metrics.json").write_text(
        json.dumps(report.as_dict(), indent=1, sort_keys=True) + "\n")
    config = {"pred": str(pred_path), "gt": str(gt_path),
              "valid": str(valid_path) if valid_path else None,
              "focal": focal, "baseline": baseline}
    _write_manifest(out, "eval", config, 0, ["metrics.json"])
    for key, val in sorted(report.as_dict().items()):
        print(f"{key:6s} {val:.6f}")
    return EXIT_OK


def _gradcheck_cases(seed):
    """Small finite-difference probes, one per differentiable operation."""
    rng = np.random.default_rng(seed)

    def arr(*shape, lo=-1.0, hi=1.0):
        return rng.uniform(lo, hi, size=shape)

    cases = []

    def case(name, fn, *inputs):
        cases.append((name, fn, inputs))

    case("add", lambda a, b: ng.total(ng.add(a, b)), arr(3, 4), arr(3, 4))
    case("mul", lambda a, b: ng.total(ng.mul(a, b)), arr(3, 4), arr(3, 4))
    case("div", lambda a, b: ng.total(ng.div(a, b)), arr(3, 4),
         arr(3, 4, lo=1.0, hi=2.0))
    case("exp", lambda a: ng.total(ng.exp(a)), arr(3, 4))
    case("sigmoid", lambda a: ng.total(ng.sigmoid(a)), arr(3, 4))
    case("tanh", lambda a: ng.total(ng.tanh(a)), arr(3, 4))
    case("relu", lambda a: ng.total(ng.relu(a)), arr(3, 4, lo=0.5, hi=1.5))
    case("absval", lambda a: ng.total(ng.absval(a)), arr(3, 4, lo=0.5, hi=1.5))
    case("softmax", lambda a: ng.total(ng.mul(ng.softmax_lastdim(a), a)),
         arr(3, 5))
    case("conv2d", lambda x, w, b: ng.total(ng.conv2d(x, w, bias=b, padding=1)),
         arr(2, 5, 6), arr(3, 2, 3, 3), arr(3))
    case("avgpool2d", lambda x: ng.total(ng.mul(ng.avgpool2d(x),
                                                ng.avgpool2d(x))), arr(2, 4, 6))
    case("upsample2x", lambda x: ng.total(ng.mul(ng.upsample2x(x),
                                                 ng.upsample2x(x))), arr(2, 3, 4))
    case("gather", lambda v, c: ng.total(ng.gather_linear_lastdim(v, c)),
         arr(3, 8), arr(3, lo=0.6, hi=6.2))
    case("neighbors3x3", lambda a: ng.total(ng.mul(ng.neighbors3x3(a),
                                                   ng.neighbors3x3(a))),
         arr(4, 5))
    case("mean3x3", lambda a: ng.total(ng.mul(ng.mean3x3(a), ng.mean3x3(a))),
         arr(4, 5))
    case("correlation", lambda fl, fr: ng.total(
        ng.mul(build_correlation(fl, fr), build_correlation(fl, fr))),
         arr(3, 2, 5), arr(3, 2, 5))
    lk = LookupConfig(radius=2, levels=2)
    case("lookup", lambda fl, fr, d: ng.total(lookup(
        build_pyramid(build_correlation(fl, fr), lk), d, lk)),
         arr(3, 2, 8), arr(3, 2, 8), arr(2, 8, lo=1.2, hi=3.8))
    case("cspn", lambda d, a: ng.total(cspn_propagate(
        d, normalize_affinity(a), SparseDisparity.empty((4, 5)), 2)),
         arr(4, 5), arr(8, 4, 5))
    case("ssim", lambda a, b: ng.total(ssim(a, b)),
         arr(4, 5, lo=0.2, hi=0.8), arr(4, 5, lo=0.2, hi=0.8))
    return cases


def cmd_gradcheck(args):
    out = _out_dir(args) if args.out else None
    seed = _setting(args, _file_cfg(args), "seed", 0)
    results = {}
    worst = 0.0
    for name, fn, inputs in _gradcheck_cases(seed):
        err = ng.gradient_check(lambda leaves, fn=fn: fn(*leaves), list(inputs))
        results[name] = err
        worst = max(worst, err)
        print(f"{name:12s} {err:.3e}")
    ok = worst < 1e-4
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAIL'})")
    if out is not None:
        (out / "gradcheck.json").write_text(
            json.dumps(results, indent=1, sort_keys=True) + "\n")
        _write_manifest(out, "gradcheck", {"tolerance": 1e-4}, seed,
                        ["gradcheck.json"])
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablate(args):
    file_cfg = _file_cfg(args)
    scene = _resolve_section(args, file_cfg, "scene", SceneConfig)
    model_cfg = _resolve_section(args, file_cfg, "model", ModelConfig)
    checkpoint = _setting(args, file_cfg, "checkpoint", None, required=True)
    iters_spec = str(_setting(args, file_cfg, "iters", "1,2,4,8"))
    scenes = _setting(args, file_cfg, "scenes", 20)
    points = _setting(args, file_cfg, "points", 500)
    seed = _setting(args, file_cfg, "seed", 0)
    out = _out_dir(args)
    try:
        model = StereoModel.load(checkpoint, config=model_cfg)
    except ValueError as exc:
        raise ParseError(f"{checkpoint}: {exc}")
    iters = [int(t) for t in iters_spec.split(",") if t]
    if not iters or any(k < 0 for k in iters):
        raise ParseError(f"bad --iters list {iters_spec!r}")
    cfg = TrainConfig(scene=scene, model=model_cfg, n_points=points, seed=seed)
    with ThreadPoolExecutor(max_workers=_jobs(args)) as pool:
        reports = list(pool.map(
            lambda k: evaluate(model, cfg, count=scenes, gru_iters=k), iters))
    rows = []
    for k, rep in zip(iters, reports):
        row = {"iters": k}
        row.update(rep.as_dict())
        rows.append(row)
        print(f"iters {k:3d}  epe {rep.epe:.4f}  d1 {rep.d1:.2f}")
    write_ablation_csv(out / "ablation.csv", rows)
    config = {"scene": asdict(scene), "model": model_cfg.to_dict(),
              "iters": iters_spec, "scenes": scenes, "points": points,
              "checkpoint": str(checkpoint)}
    _write_manifest(out, "ablate", config, seed, ["ablation.csv"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def build_parser():
    parser = _Parser(prog="lidarstereo",
                     description="sparse-LiDAR-assisted stereo disparity toolkit")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="JSON config file (or a manifest)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None,
                       help="sample-level parallelism (default: cores)")
        p.add_argument("--out", required=needs_out,
                       help="output directory (all artifacts go here)")

    p = sub.add_parser("generate", help="emit synthetic scenes + sparse points")
    common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--points", type=int, default=None)
    _add_config_flags(p, "scene", SceneConfig)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("train", help="train a model on synthetic scenes")
    common(p)
    _add_config_flags(p, "train", TrainConfig)
    _add_config_flags(p, "scene", SceneConfig)
    _add_config_flags(p, "model", ModelConfig)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("infer", help="stereo pair + sparse CSV -> PFM disparity")
    common(p)
    p.add_argument("--left")
    p.add_argument("--right")
    p.add_argument("--sparse", default=None)
    p.add_argument("--checkpoint")
    p.add_argument("--color", action="store_true", default=None,
                   help="also write a color-mapped PPM")
    _add_config_flags(p, "model", ModelConfig)
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("eval", help="prediction vs ground truth -> metrics JSON")
    common(p)
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--valid", default=None)
    p.add_argument("--focal", type=float, default=None)
    p.add_argument("--baseline", type=float, default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p, needs_out=False)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("ablate", help="iteration-count sweep on held-out scenes")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--iters", default=None)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--points", type=int, default=None)
    _add_config_flags(p, "scene", SceneConfig)
    _add_config_flags(p, "model", ModelConfig)
    p.set_defaults(handler=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.handler(args)
    except (ParseError, SceneConfigError, DegenerateMaskError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def run():
    raise SystemExit(main())


if __name__ == "__main__":
    run()
