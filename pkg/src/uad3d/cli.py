"""Command-line entry point: synth, train, calibrate, segment, eval, gradcheck, benchmark.

Every command writes ``manifest.json`` into its output directory. Failures
print one JSON line on stderr and exit with 2 (config), 3 (I/O) or 4 (numeric).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from . import pipeline as P
from .benchmark import BenchmarkConfig, run_benchmark
from .data import (PhantomSpec, Volume, VolumeFormatError, generate_dataset, list_volumes, preprocess,
                   read_volume, write_volume)
from .gradcheck import run_architecture_suite, run_primitive_suite
from .models import CheckpointError, load_checkpoint
from .tensor import DimensionError, DomainError
from .trainer import ConfigError, NumericError, TrainConfig, format_kv, load_kv, train

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


def write_manifest(out_dir: Path, command: str, config: Dict[str, str], seed: Optional[int],
                   inputs: List[str], outputs: List[str], started: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": inputs,
        "outputs": outputs,
        "duration_s": round(time.perf_counter() - started, 3),
    }
    path = out_dir / "manifest.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def _read_config(path: Optional[str]) -> Dict[str, str]:
    if path is None:
        return {}
    try:
        return load_kv(path)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot read config {path}: {exc.strerror}", path=path)


def _unknown_key(exc: KeyError) -> CliError:
    key = exc.args[0]
    return CliError(EXIT_CONFIG, "config", f"unknown config key: {key}", key=key)


def _load_case_volumes(data_dir: str, arch) -> List[Volume]:
    paths = list_volumes(data_dir)
    if not paths:
        raise CliError(EXIT_IO, "io", f"no .uadv volumes in {data_dir}", path=data_dir)
    return [preprocess(v, arch.volume_shape(v.shape[0])) for v in map(read_volume, paths)]


def _cases(volumes: List[Volume], model, slab: Optional[int], seed: Optional[int], sample: bool):
    return {v.id: P.make_case(v, P.anomaly_map(v, model, seed=seed, sample=sample), slab=slab) for v in volumes}


def _out(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    started = time.perf_counter()
    raw = _read_config(args.spec)
    try:
        spec = PhantomSpec.from_mapping(raw)
    except KeyError as exc:
        raise _unknown_key(exc)
    out = _out(args.out)
    written = []
    for v in generate_dataset(spec, args.n, args.lesioned, start=args.start):
        path = out / f"{v.id}.uadv"
        write_volume(v, path)
        written.append(str(path))
    write_manifest(out, "synth", {**spec.to_mapping(), "n": str(args.n), "lesioned": str(args.lesioned),
                                  "start": str(args.start)}, spec.seed,
                   [args.spec] if args.spec else [], written, started)
    print(f"wrote {len(written)} volumes to {out}")
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = TrainConfig.from_mapping(_read_config(args.config))
    if not cfg.checkpoint:
        raise CliError(EXIT_CONFIG, "config", "missing config key: checkpoint", key="checkpoint")
    out = _out(str(Path(cfg.checkpoint).parent))
    if not cfg.log:
        cfg.log = str(out / "train_log.csv")
    result = train(cfg)
    last = result.epoch_means[-1]
    print(f"trained {len(result.log)} iterations; last epoch total {last['total']:.6f} raw_recon {last['raw_recon']:.6f}")
    write_manifest(out, "train", cfg.to_mapping(), cfg.seed, [args.config, cfg.dataset],
                   [cfg.checkpoint, cfg.log], started)
    return 0


def cmd_calibrate(args) -> int:
    started = time.perf_counter()
    model = load_checkpoint(args.model)
    sample = not args.posterior_mean
    cases = _cases(_load_case_volumes(args.data, model.config), model, args.slab or None, args.seed, sample)
    calib_ids, test_ids = P.split_half(sorted(cases), args.seed)
    cal = P.calibrate_threshold([cases[i] for i in calib_ids])
    out = _out(args.out)
    mapping = {**cal.to_mapping(), "test_cases": ",".join(test_ids), "seed": str(args.seed),
               "slab": str(args.slab), "sample": str(sample)}
    path = out / "calibration.txt"
    path.write_text(format_kv(mapping))
    for thr, d in zip(cal.candidates, cal.mean_dice):
        print(f"threshold {thr:.6f}  mean dice {d:.4f}{'  <- chosen' if thr == cal.chosen else ''}")
    write_manifest(out, "calibrate", {"seed": str(args.seed), "slab": str(args.slab), "sample": str(sample)},
                   args.seed, [args.model, args.data], [str(path)], started)
    return 0


def _load_calibration(path: str) -> Dict[str, str]:
    raw = _read_config(path)
    for key in ("threshold", "candidates", "mean_dice", "test_cases", "seed", "slab", "sample"):
        if key not in raw:
            raise CliError(EXIT_CONFIG, "config", f"missing config key: {key}", key=key)
    return raw


def _agg_lines(agg: Dict[str, float]) -> str:
    return "".join(f"{k}={v!r}\n" for k, v in agg.items())


def cmd_segment(args) -> int:
    started = time.perf_counter()
    cal = _load_calibration(args.calibration)
    threshold = float(cal["threshold"])
    seed = int(cal["seed"])
    model = load_checkpoint(args.model)
    cases = _cases(_load_case_volumes(args.data, model.config), model, int(cal["slab"]) or None, seed,
                   cal["sample"] == "True")
    wanted = [c for c in cal["test_cases"].split(",") if c]
    missing = [c for c in wanted if c not in cases]
    if missing:
        raise CliError(EXIT_IO, "io", f"test case {missing[0]} not found in {args.data}", path=args.data)
    out = _out(args.out)
    outputs = []
    segs = {}
    for cid in wanted:
        case = cases[cid]
        seg = P.segment(case, threshold)
        segs[cid] = seg.mask
        vol = Volume(voxels=seg.mask.astype(np.float32), brain_mask=case.brain_mask, lesion_mask=None, id=cid,
                     metadata={"kind": "segmentation", "threshold": repr(threshold)})
        rec = Volume(voxels=case.reconstruction.astype(np.float32), brain_mask=case.brain_mask, id=cid,
                     metadata={"kind": "reconstruction"})
        for suffix, v in (("seg", vol), ("recon", rec)):
            path = out / f"{cid}.{suffix}.uadv"
            write_volume(v, path)
            outputs.append(str(path))
        if args.panels:
            path = out / f"{cid}.pgm"
            P.dump_panels(case, seg.mask, path)
            outputs.append(str(path))
    reports, agg = P.evaluate_split([cases[c] for c in wanted], threshold, segmentations=segs)
    P.write_report_csv(reports, out / "report.csv")
    (out / "aggregate.txt").write_text(_agg_lines(agg))
    print(P.format_aggregate(agg))
    write_manifest(out, "segment", {"threshold": repr(threshold), "seed": str(seed), "slab": cal["slab"]}, seed,
                   [args.model, args.data, args.calibration], outputs + [str(out / "report.csv")], started)
    return 0


def cmd_eval(args) -> int:
    """Score stored segmentations against the ground truth, without touching the model."""
    started = time.perf_counter()
    cal = _load_calibration(args.calibration)
    threshold = float(cal["threshold"])
    slab = int(cal["slab"]) or None
    truth = {v.id: v for v in map(read_volume, list_volumes(args.data))}
    seg_dir = Path(args.segmentations)
    cases, segs = [], {}
    for cid in [c for c in cal["test_cases"].split(",") if c]:
        if cid not in truth:
            raise CliError(EXIT_IO, "io", f"test case {cid} not found in {args.data}", path=args.data)
        seg = read_volume(seg_dir / f"{cid}.seg.uadv")
        rec = read_volume(seg_dir / f"{cid}.recon.uadv")
        v = preprocess(truth[cid], seg.shape)
        cases.append(P.EvalCase(id=cid, image=v.voxels, reconstruction=rec.voxels, anomaly=np.zeros(v.shape),
                                brain_mask=v.brain_mask, truth=v.lesion_mask, slab=slab))
        segs[cid] = seg.voxels > 0.5
    reports, agg = P.evaluate_split(cases, threshold, segmentations=segs)
    out = _out(args.out)
    P.write_report_csv(reports, out / "report.csv")
    (out / "aggregate.txt").write_text(_agg_lines(agg))
    print(P.format_aggregate(agg))
    write_manifest(out, "eval", {"threshold": repr(threshold), "slab": cal["slab"]}, None,
                   [args.data, args.segmentations, args.calibration],
                   [str(out / "report.csv"), str(out / "aggregate.txt")], started)
    return 0


def cmd_gradcheck(args) -> int:
    started = time.perf_counter()
    reports = run_primitive_suite()
    if not args.primitives_only:
        reports += run_architecture_suite(max_coords=args.max_coords)
    failed = 0
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{r.name:28s} max_rel_err {r.max_error:.3e}  {status}")
    print(f"{len(reports) - failed}/{len(reports)} passed in {time.perf_counter() - started:.1f}s")
    if args.out:
        out = _out(args.out)
        path = out / "gradcheck.txt"
        path.write_text("".join(f"{r.name}={r.max_error!r}\n" for r in reports))
        write_manifest(out, "gradcheck", {"max_coords": str(args.max_coords)}, 0, [], [str(path)], started)
    return 1 if failed else 0


def cmd_benchmark(args) -> int:
    started = time.perf_counter()
    raw = _read_config(args.config)
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    try:
        cfg = BenchmarkConfig.from_mapping(raw)
    except KeyError as exc:
        raise _unknown_key(exc)
    out = _out(args.out)
    res = run_benchmark(cfg, out_dir=out)
    print(f"threshold {res.calibration.chosen:.6f}")
    print(P.format_aggregate(res.aggregate))
    print("timings " + " ".join(f"{k}={v:.1f}s" for k, v in res.timings.items()))
    write_manifest(out, "benchmark", res.config.to_mapping(), res.config.seed, [args.config] if args.config else [],
                   [str(out / n) for n in ("metrics.csv", "calibration.txt", "aggregate.txt", "model.uadm",
                                           "train_log.csv")], started)
    return 0


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uad3d", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"uad3d {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate phantom volumes")
    s.add_argument("--spec", help="key=value phantom spec file (defaults when omitted)")
    s.add_argument("--n", type=int, required=True, help="number of volumes")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--lesioned", action="store_true", help="insert lesions")
    s.add_argument("--start", type=int, default=0, help="first phantom index")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a VAE on a directory of healthy volumes")
    s.add_argument("--config", required=True, help="key=value training config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("calibrate", help="split lesioned volumes and pick the threshold on one half")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="directory of lesioned volumes")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0, help="split and sampling seed")
    s.add_argument("--slab", type=int, default=0, help="central axial slices scored (0 = all)")
    s.add_argument("--posterior-mean", action="store_true",
                   help="decode the posterior mean instead of seeded latent samples")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("segment", help="segment the held-out half at the calibrated threshold")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--calibration", required=True, help="calibration.txt from the calibrate command")
    s.add_argument("--out", required=True)
    s.add_argument("--panels", action="store_true", help="also write PGM slice panels")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("eval", help="score stored segmentations against ground truth")
    s.add_argument("--data", required=True)
    s.add_argument("--segmentations", required=True, help="output directory of the segment command")
    s.add_argument("--calibration", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every primitive and architecture")
    s.add_argument("--max-coords", type=int, default=24, help="sampled coordinates per architecture input")
    s.add_argument("--primitives-only", action="store_true")
    s.add_argument("--out", help="optional directory for the report and manifest")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("benchmark", help="synthetic end-to-end run: synth, train, calibrate, evaluate")
    s.add_argument("--config", help="key=value overrides (seed, n_train, spec.*, train.*)")
    s.add_argument("--seed", type=int, help="overrides the config seed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)
    return p


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "exit": code, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc), **exc.extra)
    except ConfigError as exc:
        msg = str(exc)
        extra = {"key": msg.split(": ", 1)[1]} if msg.startswith(("unknown config key", "missing config key")) else {}
        return _fail(EXIT_CONFIG, "config", msg, **extra)
    except (NumericError, DomainError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except (OSError, VolumeFormatError, CheckpointError) as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except (ValueError, DimensionError) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))


if __name__ == "__main__":
    sys.exit(main())
