"""``mvtt`` command line: phantom | train | infer | eval | gradcheck | export-slices.

Flags may be given as ``--key value``, ``--key=value`` or bare ``key=value``.
``--config file.json`` supplies defaults for any flag (a flat object of flag
names, or a previous run's manifest.json); explicit flags override it.
Every command writes ``manifest.json`` into its output directory as its last
step, so the exit status is 0 only when all declared outputs exist.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import re
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor_core as tc
from .checkpoint import CheckpointError, load_checkpoint
from .gradcheck import TOLERANCE, convlstm_check, model_check, op_checks
from .metrics_eval import bland_altman, confusion, mean_sd, metrics, pearson, scar_burden
from .mvtt_net import MvttConfig, infer
from .phantom import PhantomSpec, generate_phantom, phantom_series
from .plotting import bland_altman_plot, correlation_plot
from .trainer import NonFiniteLoss, Sample, TrainConfig, make_folds, train
from .volume import Volume, VolumeFormatError, normalize, read_volume, write_volume

log = logging.getLogger("mvtt")

LABEL_SUFFIXES = ("_anatomy", "_scar")
DERIVED_SUFFIXES = ("_anatomy", "_scar", "_anatomy_prob", "_scar_prob")


class CliError(Exception):
    pass


# --------------------------------------------------------------- arguments

def _dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"dims must look like 16x32x32, got {text!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be integers, got {text!r}") from None
    if min(dims) < 1:
        raise argparse.ArgumentTypeError("dims must be positive")
    return dims


def _floats3(text: str) -> tuple[float, float, float]:
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three values like 2x1x1, got {text!r}")
    return tuple(float(p) for p in parts)


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON file of flag defaults")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS so every reduction runs in a fixed order")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvtt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mvtt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic phantoms with ground truth")
    _common(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--dims", type=_dims, default=(16, 32, 32), help="ZxYxX voxel counts")
    p.add_argument("--spacing", type=_floats3, default=(2.0, 1.0, 1.0), help="voxel spacing in mm, ZxYxX")
    p.add_argument("--scar-patches", type=int, default=None,
                   help="fixed patch count per phantom (default: drawn per phantom)")
    p.add_argument("--patch-min", type=int, default=1)
    p.add_argument("--patch-max", type=int, default=6)
    p.add_argument("--noise", type=float, default=None, help="additive noise SD")

    p = sub.add_parser("train", help="train a model on a directory of phantoms")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="directory of <id>.vjson with <id>_anatomy/_scar labels")
    p.add_argument("--val-data", type=Path, help="validation directory; enables early stopping")
    p.add_argument("--folds", type=int, default=None, help="split --data into k folds")
    p.add_argument("--fold", type=int, default=0, help="held-out fold used for validation")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=0.98)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--width", default="1", help="width multiplier on the base channel count, e.g. 1/4")
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--resume", type=Path, help="train_state.npz from an interrupted run")

    p = sub.add_parser("infer", help="segment volumes with a trained checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--volume", type=Path, action="append", default=[], help="volume header; repeatable")
    p.add_argument("--volumes", type=Path, help="directory of intensity volumes")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _common(p)
    p.add_argument("--pred", type=Path, required=True, help="directory of <id>_anatomy/_scar predictions")
    p.add_argument("--gt", type=Path, required=True, help="directory of <id>_anatomy/_scar ground truth")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    _common(p, out_required=False)
    p.add_argument("--only", choices=["ops", "convlstm", "model"], action="append",
                   help="restrict to a group; repeatable")
    p.add_argument("--inject-fault", choices=["conv2d"], help=argparse.SUPPRESS)

    p = sub.add_parser("export-slices", help="write each axial slice as an 8-bit PGM")
    _common(p)
    p.add_argument("--volume", type=Path, required=True)
    return parser


_KV = re.compile(r"^([A-Za-z][A-Za-z0-9_-]*)=(.*)$", re.S)


def _expand_kv(argv: list[str]) -> list[str]:
    """Turn bare ``key=value`` tokens into ``--key value``."""
    out = []
    for tok in argv:
        m = _KV.match(tok)
        if m:
            out += ["--" + m.group(1).replace("_", "-"), m.group(2)]
        else:
            out.append(tok)
    return out


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    argv = _expand_kv(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        cfg = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read --config {args.config}: {exc}")
    if isinstance(cfg, dict) and "config" in cfg and "command" in cfg:
        cfg = cfg["config"]  # a previous run's manifest
    if not isinstance(cfg, dict):
        parser.error("--config must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest in ("command", "config"):
            continue
        if dest not in known:
            parser.error(f"--config: unknown setting {key!r} for {args.command}")
        defaults[dest] = _revive(dest, value)
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _revive(dest: str, value):
    """JSON values back into the types argparse would have produced."""
    if value is None:
        return None
    if dest in ("out", "data", "val_data", "checkpoint", "volumes", "resume", "pred", "gt"):
        return Path(value)
    if dest == "volume":
        return [Path(v) for v in value] if isinstance(value, list) else Path(value)
    if dest in ("dims", "spacing"):
        return tuple(value)
    return value


def _jsonable(args: argparse.Namespace) -> dict:
    out = {}
    for k, v in vars(args).items():
        if k in ("config", "verbose"):
            continue
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, (list, tuple)):
            v = [str(x) if isinstance(x, Path) else x for x in v]
        out[k] = v
    return out


# ----------------------------------------------------------------- helpers

@contextlib.contextmanager
def _thread_limit(deterministic: bool):
    env = os.environ.get("MVTT_THREADS")
    limit = 1 if deterministic else (int(env) if env else None)
    if limit is None:
        yield None
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=limit):
        yield limit


def _write_manifest(out: Path, command: str, args, artifacts, seconds: float, results=None, threads=None) -> Path:
    manifest = {
        "command": command,
        "config": _jsonable(args),
        "seed": args.seed,
        "artifacts": sorted(str(Path(a).relative_to(out)) if Path(a).is_relative_to(out) else str(a)
                            for a in artifacts),
        "version": __version__,
        "seconds": seconds,
        "threads": threads,
    }
    if results is not None:
        manifest["results"] = results
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def _volume_ids(directory: Path) -> list[str]:
    """Intensity volume ids in a directory (labels and predictions excluded)."""
    if not directory.is_dir():
        raise CliError(f"data directory {directory} does not exist")
    ids = []
    for h in sorted(directory.glob("*.vjson")):
        if h.stem.endswith(DERIVED_SUFFIXES):
            continue
        ids.append(h.stem)
    return ids


def _load_samples(directory: Path) -> list[Sample]:
    ids = _volume_ids(directory)
    if not ids:
        raise CliError(f"no volumes found in {directory}")
    samples = []
    for ident in ids:
        img = read_volume(directory / f"{ident}.vjson")
        labels = []
        for suffix in LABEL_SUFFIXES:
            path = directory / f"{ident}{suffix}.vjson"
            if not path.exists():
                raise CliError(f"{ident}: missing label volume {path.name}")
            labels.append(read_volume(path))
        if img.kind != "intensity" or any(lab.kind != "label" or lab.dims != img.dims for lab in labels):
            raise CliError(f"{ident}: image/label kinds or dims disagree")
        samples.append(Sample(ident, normalize(img).values, labels[0].values, labels[1].values))
    return samples


# ---------------------------------------------------------------- commands

def cmd_phantom(args) -> tuple[list[Path], dict]:
    default = PhantomSpec()
    base = PhantomSpec(dims=args.dims, spacing_mm=args.spacing)
    if args.noise is not None:
        base = replace(base, noise_sd=args.noise)
    # shrink or grow the default geometry with the requested grid extent
    scale = float(np.min(base.extent_mm / default.extent_mm))
    base = replace(base, semi_axes_mm=tuple(a * scale for a in default.semi_axes_mm),
                   pv_stub_radius_mm=default.pv_stub_radius_mm * min(scale, 1.0),
                   pv_stub_length_mm=default.pv_stub_length_mm * min(scale, 1.0))
    if args.count < 1:
        raise CliError("--count must be >= 1")
    specs = phantom_series(args.count, base, seed=args.seed, scar_patches=args.scar_patches,
                           patch_range=(args.patch_min, args.patch_max))
    artifacts, records = [], []
    width = max(3, len(str(args.count - 1)))
    for n, spec in enumerate(specs):
        spec.validate()
        ph = generate_phantom(spec)
        ident = f"phantom_{n:0{width}d}"
        artifacts += [write_volume(ph.intensity, args.out / ident),
                      write_volume(ph.anatomy, args.out / f"{ident}_anatomy"),
                      write_volume(ph.scar, args.out / f"{ident}_scar")]
        records.append({"id": ident, "seed": spec.seed, "scar_fraction": ph.scar_fraction,
                        "scar_burden_pct": ph.scar_burden_pct})
    return artifacts, {"phantoms": records}


def cmd_train(args) -> tuple[list[Path], dict]:
    samples = _load_samples(args.data)
    val: list[Sample] = []
    if args.folds is not None:
        plan = make_folds([s.id for s in samples], args.folds, args.seed)
        if not 0 <= args.fold < args.folds:
            raise CliError(f"--fold must lie in [0, {args.folds})")
        train_ids, held = plan.split(args.fold)
        val = [s for s in samples if s.id in held]
        samples = [s for s in samples if s.id in train_ids]
    if args.val_data is not None:
        val += _load_samples(args.val_data)
    shapes = {s.image.shape[1:] for s in samples + val}
    if len(shapes) != 1:
        raise CliError(f"all volumes must share one slice shape, found {sorted(shapes)}")
    cfg = TrainConfig(initial_lr=args.lr, lr_decay_rate=args.lr_decay, max_epochs=args.epochs,
                      early_stop_patience=args.patience, seed=args.seed, deterministic=args.deterministic)
    model_cfg = MvttConfig(slice_shape=shapes.pop(), base_channels=args.base_channels,
                           width_multiplier=args.width, threshold=args.threshold, seed=args.seed)
    res = train(samples, val, cfg, model_cfg, out_dir=args.out, resume_from=args.resume)
    last = res.log[-1] if res.log else {}
    results = {"train_ids": [s.id for s in samples], "val_ids": [s.id for s in val], "epochs_run": len(res.log),
               "best_epoch": res.best_epoch, "stopped_early": res.stopped_early,
               "final_train_loss": last.get("train_loss"), "final_val_loss": last.get("val_loss")}
    return [args.out / "model.ckpt", args.out / "train_log.jsonl", args.out / "train_state.npz"], results


def cmd_infer(args) -> tuple[list[Path], dict]:
    model = load_checkpoint(args.checkpoint)
    paths = list(args.volume)
    if args.volumes is not None:
        paths += [args.volumes / f"{i}.vjson" for i in _volume_ids(args.volumes)]
    if not paths:
        raise CliError("give --volume and/or --volumes")
    artifacts, cases = [], []
    for path in paths:
        vol = read_volume(path)
        if vol.kind != "intensity":
            raise CliError(f"{path}: expected an intensity volume")
        ident = Path(path).with_suffix("").name
        t0 = time.perf_counter()
        pair = infer(normalize(vol).values, model)
        seconds = time.perf_counter() - t0
        sp = vol.spacing_mm
        artifacts += [write_volume(Volume(pair.m_l.astype(np.float32), sp), args.out / f"{ident}_anatomy_prob"),
                      write_volume(Volume(pair.m_as.astype(np.float32), sp), args.out / f"{ident}_scar_prob"),
                      write_volume(Volume(pair.anatomy_mask, sp, "label"), args.out / f"{ident}_anatomy"),
                      write_volume(Volume(pair.scar_mask, sp, "label"), args.out / f"{ident}_scar")]
        log.info("%s: %d slices in %.3f s", ident, vol.dims[0], seconds)
        cases.append({"id": ident, "dims": list(vol.dims), "seconds": seconds})
    return artifacts, {"cases": cases}


def _burden(scar: Volume, anat: Volume) -> float | None:
    try:
        return scar_burden(scar, anat).percentage
    except ValueError:
        return None


def cmd_eval(args) -> tuple[list[Path], dict]:
    gt_ids = [i for i in _volume_ids(args.gt) if (args.gt / f"{i}_anatomy.vjson").exists()]
    if not gt_ids:
        raise CliError(f"no ground-truth volumes with labels in {args.gt}")
    records = []
    for ident in gt_ids:
        rec = {"id": ident}
        vols = {}
        for task in ("anatomy", "scar"):
            pred_path = args.pred / f"{ident}_{task}.vjson"
            if not pred_path.exists():
                raise CliError(f"{ident}: no prediction {pred_path}")
            vols[("pred", task)] = read_volume(pred_path)
            vols[("gt", task)] = read_volume(args.gt / f"{ident}_{task}.vjson")
            rec[task] = metrics(confusion(vols[("pred", task)], vols[("gt", task)])).to_dict()
        rec["scar_burden_pct"] = _burden(vols[("pred", "scar")], vols[("pred", "anatomy")])
        rec["reference_scar_burden_pct"] = _burden(vols[("gt", "scar")], vols[("gt", "anatomy")])
        records.append(rec)

    agg: dict = {"means": {}, "sds": {}}
    for task in ("anatomy", "scar"):
        for key in ("ac", "se", "sp", "di"):
            stats = mean_sd([r[task][key] for r in records])
            agg["means"][f"{task}_{key}"] = stats["mean"]
            agg["sds"][f"{task}_{key}"] = stats["sd"]
    pairs = [(r["reference_scar_burden_pct"], r["scar_burden_pct"]) for r in records
             if r["scar_burden_pct"] is not None and r["reference_scar_burden_pct"] is not None]
    ref = [a for a, _ in pairs]
    est = [b for _, b in pairs]
    agg["n_burden_pairs"] = len(pairs)
    agg["pearson"] = None
    agg["bland_altman"] = None
    artifacts = []
    if len(pairs) >= 2:
        ba = bland_altman(ref, est)
        agg["pearson"] = ba.pearson_r
        agg["bland_altman"] = {"bias": ba.bias, "loa_low": ba.loa_low, "loa_high": ba.loa_high}
        artifacts.append(correlation_plot(ref, est, args.out / "burden_correlation.png", ba.pearson_r))
        artifacts.append(bland_altman_plot(ref, est, ba, args.out / "burden_bland_altman.png"))

    report = {"volumes": records, "aggregate": agg}
    report_path = args.out / "report.json"
    report_path.write_text(json.dumps(report, indent=1) + "\n")
    csv_path = args.out / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = [f"{t}_{k}" for t in ("anatomy", "scar") for k in ("ac", "se", "sp", "di")]
        w.writerow(["id", *cols, "scar_burden_pct", "reference_scar_burden_pct"])
        for r in records:
            w.writerow([r["id"], *[r[c.split("_")[0]][c.split("_")[1]] for c in cols],
                        r["scar_burden_pct"], r["reference_scar_burden_pct"]])
    return [report_path, csv_path, *artifacts], {"aggregate": agg}


def cmd_gradcheck(args) -> tuple[list[Path], dict]:
    groups = args.only or ["ops", "convlstm", "model"]
    fault = tc.inject_fault(args.inject_fault) if args.inject_fault else contextlib.nullcontext()
    results = []
    with fault:
        if "ops" in groups:
            results += op_checks(args.seed)
        if "convlstm" in groups:
            results.append(convlstm_check(args.seed))
        if "model" in groups:
            results.append(model_check(args.seed))
    rows = []
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{status}  {r.name:<28} max rel err {r.max_rel_error:.3e}  worst {r.worst_param}  {r.seconds:.2f}s")
        rows.append({"name": r.name, "max_rel_error": r.max_rel_error, "worst_param": r.worst_param,
                     "passed": r.passed, "seconds": r.seconds})
    failed = [r["name"] for r in rows if not r["passed"]]
    report = args.out / "gradcheck.json"
    report.write_text(json.dumps({"tolerance": TOLERANCE, "checks": rows}, indent=1) + "\n")
    if failed:
        raise CliError(f"gradient check failed for: {', '.join(failed)}")
    return [report], {"checks": len(rows), "tolerance": TOLERANCE}


def window_to_u8(values: np.ndarray) -> np.ndarray:
    """Min-max window over the whole volume to 0..255; a constant volume maps to 128."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.full(v.shape, 128, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path: Path, image: np.ndarray) -> Path:
    h, w = image.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    return path


def cmd_export_slices(args) -> tuple[list[Path], dict]:
    vol = read_volume(args.volume)
    u8 = window_to_u8(vol.values)
    width = max(3, len(str(u8.shape[0] - 1)))
    artifacts = [write_pgm(args.out / f"slice_{z:0{width}d}.pgm", u8[z]) for z in range(u8.shape[0])]
    return artifacts, {"slices": len(artifacts)}


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "export-slices": cmd_export_slices}


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out is None:
        args.out = Path("mvtt-gradcheck")
    manifest_path = args.out / "manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()  # a stale manifest must not vouch for a failed rerun
    t0 = time.perf_counter()
    try:
        with _thread_limit(args.deterministic) as threads:
            args.out.mkdir(parents=True, exist_ok=True)
            artifacts, results = COMMANDS[args.command](args)
            _write_manifest(args.out, args.command, args, artifacts, time.perf_counter() - t0, results, threads)
    except (CliError, CheckpointError, VolumeFormatError, NonFiniteLoss, ValueError, OSError) as exc:
        print(f"mvtt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
