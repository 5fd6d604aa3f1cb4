"""Command line entry point: ``psdistill <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from .evaluation import evaluate_model
from .harness.checkpoint import checkpoint_from_bytes, load_checkpoint
from .harness.config import ConfigError, ExperimentConfig, load_config
from .harness.experiments import (DEFAULT_LAMBDAS, DEFAULT_SEEDS, RunCache, Teachers, export_lut,
                                  import_lut, lambda_sweep, run_ablation_suite)
from .harness.train import InvariantViolation, TrainingDiverged, load_split, train
from .synthscene import dataset_bytes, parse_dataset, write_dataset

logger = logging.getLogger("psdistill")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return cfg.replace(**overrides) if overrides else cfg


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_config(args) -> int:
    sys.stdout.write(_config(args).to_text())
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    split = load_split(cfg.replace(dataset_path=None))
    write_dataset(split, args.out)
    print(f"wrote {args.out}: {len(split.train)} train scenes, {len(split.gallery)} gallery scenes, "
          f"{len(split.queries)} queries")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    cfg.validate(need_files=args.teacher is None and args.teacher_lut is None)
    result = train(cfg, teacher=args.teacher, teacher_lut=args.teacher_lut, out_dir=args.out)
    sys.stdout.write(result.metrics.to_csv())
    if args.self_check:
        return _check_run(cfg, result, args)
    return 0


def _check_run(cfg, result, args) -> int:
    failures = []
    if cfg.kd_mode.uses_reid:
        if result.lut_checksum_start != result.lut_checksum_end:
            failures.append("frozen LUT changed")
        if result.checkpoint.lut.skipped_updates != result.labeled_seen:
            failures.append(f"skipped LUT writes {result.checkpoint.lut.skipped_updates} "
                            f"!= labeled samples {result.labeled_seen}")
    raw = result.checkpoint.to_bytes()
    if checkpoint_from_bytes(raw).to_bytes() != raw:
        failures.append("checkpoint does not round-trip byte-exactly")
    again = train(cfg, teacher=args.teacher, teacher_lut=args.teacher_lut)
    if again.metrics.to_csv() != result.metrics.to_csv() or again.checkpoint.to_bytes() != raw:
        failures.append("rerun with the same config and seed differs")
    for f in failures:
        print(f"SELF-CHECK FAIL: {f}", file=sys.stderr)
    if not failures:
        print("self-check passed", file=sys.stderr)
    return 1 if failures else 0


def cmd_export_lut(args) -> int:
    lut = export_lut(args.checkpoint, args.out)
    print(f"wrote {args.out}: D={lut.dim}, P={lut.num_labeled}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _config(args)
    split = load_split(cfg)
    report = evaluate_model(ckpt.build_model(), split)
    text = report.to_csv()
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(text)
        (out / "per_query.csv").write_text(report.per_query_csv())
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    cache = RunCache(Path(args.out) / "runs" if args.keep_runs else None)
    res = lambda_sweep(cfg, _floats(args.lambdas), _ints(args.seeds), cache=cache, out_dir=args.out)
    sys.stdout.write(res.plot_data())
    print(f"spearman(det_map, lambda) = {res.spearman():.3f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    paths = {"detector": args.teacher_detector, "joint": args.teacher_joint,
             "strong": args.teacher_strong, "weak": args.teacher_weak}
    teachers = Teachers.load(**paths) if any(paths.values()) else None
    cache = RunCache(Path(args.out) / "runs" if args.keep_runs else None)
    table = run_ablation_suite(cfg, _ints(args.seeds), teachers=teachers, cache=cache, out_dir=args.out)
    sys.stdout.write(table.summary())
    for msg in table.skipped:
        print(msg, file=sys.stderr)
    return 0


def cmd_check(args) -> int:
    """Fast invariant checks; exits 1 if any fails."""
    from . import numerics as nx
    from .kd import KdMode

    failures = []

    def check(name, ok):
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        if not ok:
            failures.append(name)

    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    check("matmul gradient", nx.gradient_check(lambda x, y: nx.sum(nx.matmul(x, y) ** 2), [a, b]) < 1e-4)

    cfg = ExperimentConfig().replace(**{"train.steps": args.steps, "data.n_train_scenes": 16,
                                        "data.n_gallery_scenes": 8, "data.gallery_size_per_query": 4,
                                        "data.n_queries": 4})
    teacher = train(cfg.replace(**{"oim.lambda_oim": 1.0}), evaluate=False)
    student_cfg = cfg.replace(kd_mode=KdMode.KD_REID)
    r1 = train(student_cfg, teacher_lut=teacher.checkpoint)
    r2 = train(student_cfg, teacher_lut=teacher.checkpoint)
    check("frozen LUT checksum unchanged", r1.lut_checksum_start == r1.lut_checksum_end)
    check("skipped LUT writes == labeled samples", r1.checkpoint.lut.skipped_updates == r1.labeled_seen)
    check("deterministic metrics", r1.metrics.to_csv() == r2.metrics.to_csv())
    check("deterministic checkpoint", r1.checkpoint.to_bytes() == r2.checkpoint.to_bytes())
    raw = r1.checkpoint.to_bytes()
    check("checkpoint round trip", checkpoint_from_bytes(raw).to_bytes() == raw)
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "t.olut"
        export_lut(teacher.checkpoint, p)
        check("LUT round trip", import_lut(p).to_bytes() == teacher.checkpoint.lut.to_bytes())
        try:
            import_lut(p, dim=teacher.checkpoint.lut.dim + 1)
            check("mismatched LUT rejected", False)
        except ValueError:
            check("mismatched LUT rejected", True)
        split = load_split(cfg)
        check("dataset round trip", parse_dataset(dataset_bytes(split)) == split)
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psdistill", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file (see `psdistill config`)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return sp

    with_config(sub.add_parser("config", help="print the full config schema with current values")) \
        .set_defaults(func=cmd_config)

    sp = with_config(sub.add_parser("gen-data", help="generate and write a synthetic dataset"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = with_config(sub.add_parser("train", help="train one model"))
    sp.add_argument("--out", help="output directory for checkpoint, LUT and CSVs")
    sp.add_argument("--teacher", help="teacher checkpoint for KD_DET / BOTH")
    sp.add_argument("--teacher-lut", help="LUT file (or checkpoint) for KD_REID / BOTH")
    sp.add_argument("--self-check", action="store_true",
                    help="verify LUT audit, round trip and determinism; exit 1 on failure")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("export-lut", help="write a checkpoint's LUT to a LUT file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_lut)

    sp = with_config(sub.add_parser("eval", help="evaluate a checkpoint on the test split"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("sweep", help="lambda_oim sweep"))
    sp.add_argument("--lambdas", default=",".join(map(str, DEFAULT_LAMBDAS)))
    sp.add_argument("--seeds", default=",".join(map(str, DEFAULT_SEEDS)))
    sp.add_argument("--out", required=True)
    sp.add_argument("--keep-runs", action="store_true", help="also write every run's outputs")
    sp.set_defaults(func=cmd_sweep)

    sp = with_config(sub.add_parser("ablate", help="KD ablation table"))
    sp.add_argument("--seeds", default=",".join(map(str, DEFAULT_SEEDS)))
    sp.add_argument("--out", required=True)
    sp.add_argument("--keep-runs", action="store_true")
    for slot in ("detector", "joint", "strong", "weak"):
        sp.add_argument(f"--teacher-{slot}", help=f"{slot} teacher checkpoint (all omitted: train them)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("self-check", help="fast invariant checks; nonzero exit on failure")
    sp.add_argument("--steps", type=int, default=20)
    sp.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, InvariantViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
