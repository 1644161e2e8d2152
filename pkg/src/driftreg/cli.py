"""Command-line interface.

    driftreg register FIXED MOVING [--config cfg.json] --out DIR
    driftreg eval FIXED REGISTERED [--labels-fixed P --labels-registered P] [--intermodal]
    driftreg phantom --out DIR [--config spec.json] [--intermodal]
    driftreg gradcheck [--sizes 6 7 8] [--instances 50]
    driftreg compare-optimizers --out DIR [--config spec.json]

Exit codes: 0 success, 1 usage or configuration error, 2 input/output error,
3 numerical failure.  Configuration files are JSON; unknown keys are errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .gradcheck import TOLERANCE, run_gradcheck
from .io import NiftiError, load_volume, save_dvf, save_volume
from .losses import LossError, LossWeights
from .metrics import MetricError, dice, evaluate
from .optim import OptimizerConfig, OptimizerError
from .phantom import PhantomSpec, dvf_endpoint_error, intensity_remap, make_pair
from .register import RegistrationConfig, RegistrationDiverged, micdir_config, register
from .scg import ScgError
from .volume import LabelMap, Volume, VolumeError
from .warp import warp_nearest

log = logging.getLogger("driftreg")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

# learning rates at which every optimiser reaches NCC > 0.95 on the 3-voxel phantom suite
TUNED_LR = {"sgd": 100.0, "rmsprop": 2e-3, "adam": 5e-3, "adamw": 5e-3}
TUNED_MOMENTUM = {"sgd": 0.9}


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config parsing


def _coerce(value, default, key):
    """Check a JSON value against the type of the dataclass default it replaces."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{key}: expected a list of {len(default)} values, got {value!r}")
        return tuple(_coerce(v, d, f"{key}[{i}]") for i, (v, d) in enumerate(zip(value, default)))
    raise ConfigError(f"{key}: unsupported value {value!r}")


def build_dataclass(cls, data, base=None, prefix=""):
    """Instantiate ``cls`` from a JSON object, starting from ``base`` (or the defaults).

    Nested dataclass fields take nested objects.  Unknown keys raise
    :class:`ConfigError`, as do type mismatches and invariant violations.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or cls.__name__}: expected an object, got {type(data).__name__}")
    base = base if base is not None else cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(prefix + k for k in unknown)}")
    values = {}
    for name, value in data.items():
        default = getattr(base, name)
        if dataclasses.is_dataclass(default):
            values[name] = build_dataclass(type(default), value, default, f"{prefix}{name}.")
        else:
            values[name] = _coerce(value, default, prefix + name)
    try:
        return dataclasses.replace(base, **values)
    except ValueError as e:
        raise ConfigError(f"{prefix or cls.__name__}: {e}") from e


def _read_json(path):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e


PATH_KEYS = ("fixed", "moving", "out")


def load_register_config(path):
    """``(RegistrationConfig, paths)`` from a JSON file layered over the MICDIR defaults."""
    data = _read_json(path) if path else {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    paths = {k: data.pop(k) for k in PATH_KEYS if k in data}
    for k, v in paths.items():
        if not isinstance(v, str):
            raise ConfigError(f"{k}: expected a path string, got {v!r}")
    return build_dataclass(RegistrationConfig, data, micdir_config()), paths


# ---------------------------------------------------------------- helpers


def _qualified(e):
    return f"{type(e).__module__}.{type(e).__name__}: {e}"


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _labels(path):
    v = load_volume(path).data
    lab = np.rint(v).astype(np.int64)
    if not np.array_equal(lab, v):
        raise VolumeError(f"{path}: label volume holds non-integer values")
    return lab


def _threads():
    raw = os.environ.get("DRIFTREG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DRIFTREG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DRIFTREG_THREADS must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------- commands


def cmd_register(args):
    cfg, paths = load_register_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if overrides:
        try:
            cfg = dataclasses.replace(cfg, **overrides)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    fixed_path = args.fixed or paths.get("fixed")
    moving_path = args.moving or paths.get("moving")
    out_path = args.out or paths.get("out")
    if not (fixed_path and moving_path and out_path):
        raise UsageError("register needs fixed and moving inputs and --out (on the command line or in the config)")

    f, m = load_volume(fixed_path), load_volume(moving_path)
    result = register(f, m, cfg)
    out = _out_dir(out_path)
    save_dvf(result.u_mf, out / "dvf_mf.vol", f.spacing)
    if result.u_fm is not None:
        save_dvf(result.u_fm, out / "dvf_fm.vol", f.spacing)
    save_volume(result.warped, out / "warped.nii")
    report = result.report(cfg)
    report["inputs"] = {"fixed": str(fixed_path), "moving": str(moving_path)}
    report["version"] = __version__
    _write_json(out / "result.json", report)
    final = report["final_loss"]["total"]
    print(f"registered {fixed_path} <- {moving_path}: final loss {final:.6g}, "
          f"ncc {report['metrics']['metrics']['ncc']:.4f}; wrote {out}")
    return EXIT_OK


def cmd_eval(args):
    f, r = load_volume(args.fixed), load_volume(args.registered)
    if (args.labels_fixed is None) != (args.labels_registered is None):
        raise UsageError("give both --labels-fixed and --labels-registered, or neither")
    lf = lr = None
    if args.labels_fixed is not None:
        a, b = _labels(args.labels_fixed), _labels(args.labels_registered)
        k = int(max(a.max(), b.max())) + 1
        lf, lr = LabelMap(a, k), LabelMap(b, k)
    seed = args.seed if args.seed is not None else 0
    report = evaluate(f, r, lf, lr, intermodal=args.intermodal, seed=seed)
    text = json.dumps(report, indent=2, sort_keys=True, default=_jsonable)
    print(text)
    if args.out:
        (_out_dir(args.out) / "metrics.json").write_text(text + "\n")
    return EXIT_OK


def cmd_phantom(args):
    spec = build_dataclass(PhantomSpec, _read_json(args.config)) if args.config else PhantomSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    if not args.out:
        raise UsageError("phantom needs --out")
    fixed, moving, gt, lab_f, lab_m = make_pair(spec)
    if args.intermodal:
        moving = intensity_remap(moving)
    out = _out_dir(args.out)
    save_volume(fixed, out / "fixed.vol")
    save_volume(moving, out / "moving.vol")
    save_dvf(gt, out / "gt_dvf.vol")
    save_volume(Volume(lab_f.labels.astype(np.float64)), out / "labels_fixed.vol")
    save_volume(Volume(lab_m.labels.astype(np.float64)), out / "labels_moving.vol")
    _write_json(out / "phantom.json", dataclasses.asdict(spec) | {"intermodal": bool(args.intermodal)})
    print(f"wrote phantom pair (size {spec.size}, seed {spec.seed}) to {out}")
    return EXIT_OK


def cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else 0
    results = run_gradcheck(seed, args.instances, tuple(args.sizes), flip_sign=args.inject_sign_flip)
    ok = True
    for r in results:
        status = "ok" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{r.term:14s} max_rel_err={r.max_rel_error:.3e} checked={r.checked} "
              f"kinks_skipped={r.skipped} [{status}]")
    print(f"tolerance {TOLERANCE:g}: {'all terms pass' if ok else 'gradient check failed'}")
    return EXIT_OK if ok else EXIT_NUMERIC


@dataclasses.dataclass(frozen=True)
class CompareSpec:
    seeds: int = 10
    first_seed: int = 0
    size: int = 32
    max_displacement: float = 3.0
    iterations: int = 1500
    similarity: str = "ncc"
    weights: LossWeights = LossWeights()
    sgd: OptimizerConfig = OptimizerConfig("sgd", lr=TUNED_LR["sgd"], momentum=TUNED_MOMENTUM["sgd"])
    rmsprop: OptimizerConfig = OptimizerConfig("rmsprop", lr=TUNED_LR["rmsprop"])
    adam: OptimizerConfig = OptimizerConfig("adam", lr=TUNED_LR["adam"])
    adamw: OptimizerConfig = OptimizerConfig("adamw", lr=TUNED_LR["adamw"])

    def __post_init__(self):
        if self.seeds < 1:
            raise ValueError("seeds must be >= 1")
        for kind in ("sgd", "rmsprop", "adam", "adamw"):
            if getattr(self, kind).kind != kind:
                raise ValueError(f"{kind}: optimizer kind must be {kind!r}")


def _compare_job(job):
    spec, kind, seed = job
    f, m, gt, lab_f, lab_m = make_pair(PhantomSpec(size=spec.size, seed=seed,
                                                   max_displacement=spec.max_displacement))
    cfg = RegistrationConfig(similarity=spec.similarity, weights=spec.weights,
                             optimizer=getattr(spec, kind), iterations=spec.iterations, seed=seed)
    result = register(f, m, cfg)
    warped_labels = LabelMap(warp_nearest(lab_m, result.u_mf), lab_m.num_classes)
    return {
        "optimizer": kind,
        "seed": seed,
        "ncc": result.metric_report["metrics"]["ncc"],
        "dice": dice(lab_f, warped_labels)[1],
        "epe": dvf_endpoint_error(result.u_mf, gt)[0],
        "final_loss": result.loss_trace[-1].total,
    }


def cmd_compare_optimizers(args):
    spec = build_dataclass(CompareSpec, _read_json(args.config)) if args.config else CompareSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, first_seed=args.seed)
    if args.iterations is not None:
        spec = dataclasses.replace(spec, iterations=args.iterations)
    if not args.out:
        raise UsageError("compare-optimizers needs --out")
    kinds = ("sgd", "rmsprop", "adam", "adamw")
    jobs = [(spec, k, spec.first_seed + s) for k in kinds for s in range(spec.seeds)]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_compare_job, jobs))
    else:
        runs = [_compare_job(j) for j in jobs]

    rows = []
    for k in kinds:
        mine = [r for r in runs if r["optimizer"] == k]
        row = {"optimizer": k, "lr": getattr(spec, k).lr, "runs": len(mine)}
        for metric in ("ncc", "dice", "epe"):
            vals = np.array([r[metric] for r in mine])
            row[f"{metric}_mean"] = float(vals.mean())
            row[f"{metric}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        rows.append(row)

    out = _out_dir(args.out)
    with open(out / "compare.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    spec_dict = dataclasses.asdict(spec)
    _write_json(out / "compare.json", {"spec": spec_dict, "summary": rows, "runs": runs})
    for row in rows:
        print(f"{row['optimizer']:8s} ncc={row['ncc_mean']:.4f}±{row['ncc_std']:.4f} "
              f"dice={row['dice_mean']:.4f}±{row['dice_std']:.4f} epe={row['epe_mean']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser():
    p = _Parser(prog="driftreg", description="Deformable registration by direct field optimisation.")
    p.add_argument("--version", action="version", version=f"driftreg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_help):
        sp.add_argument("--config", help=config_help)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the configured seed")

    r = sub.add_parser("register", help="register a moving volume to a fixed one")
    r.add_argument("fixed", nargs="?")
    r.add_argument("moving", nargs="?")
    common(r, "JSON registration config, applied over the MICDIR defaults")
    r.add_argument("--iterations", type=int, help="override the iteration count")
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("eval", help="metric report for a registered volume")
    e.add_argument("fixed")
    e.add_argument("registered")
    e.add_argument("--labels-fixed")
    e.add_argument("--labels-registered")
    e.add_argument("--intermodal", action="store_true", help="report only PCC, Dice and KLD")
    e.add_argument("--out", help="also write metrics.json here")
    e.add_argument("--seed", type=int, help="seed for the segmentation fallback")
    e.set_defaults(func=cmd_eval)

    ph = sub.add_parser("phantom", help="write a synthetic pair with its ground truth")
    common(ph, "JSON phantom spec")
    ph.add_argument("--intermodal", action="store_true", help="remap the moving intensities")
    ph.set_defaults(func=cmd_phantom)

    g = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    g.add_argument("--seed", type=int)
    g.add_argument("--sizes", type=int, nargs="+", default=[6, 7, 8])
    g.add_argument("--instances", type=int, default=50)
    g.add_argument("--inject-sign-flip", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("compare-optimizers", help="direct registration with each optimiser")
    common(c, "JSON comparison spec")
    c.add_argument("--iterations", type=int, help="override the iteration count")
    c.set_defaults(func=cmd_compare_optimizers)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"driftreg: usage error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"driftreg: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, NiftiError, VolumeError) as e:
        print(f"driftreg: {_qualified(e)}", file=sys.stderr)
        return EXIT_IO
    except (RegistrationDiverged, LossError, OptimizerError, ScgError, MetricError,
            FloatingPointError) as e:
        print(f"driftreg: {_qualified(e)}", file=sys.stderr)
        return EXIT_NUMERIC


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
