"""Lambda sweep, KD ablation table and LUT export/import.

Runs are memoized in a RunCache keyed by config digest plus the checksums of
any teacher model or LUT, so the sweep, the ablation table and the teachers
they need share work inside one process.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from ..kd import KdMode
from ..oim import LookupTable, lut_from_bytes, read_lut, write_lut
from ..psmodel import BackboneSize
from .checkpoint import Checkpoint, load_checkpoint
from .config import ExperimentConfig
from .train import TrainResult, train

logger = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.05, 0.1, 0.3, 0.6, 1.0)
DEFAULT_SEEDS = (0, 1, 2)
SWEEP_COLUMNS = ("lambda_oim", "seed", "search_map", "cmc_top1", "det_map", "det_recall")
ABLATION_ROWS = ("baseline", "kd_det", "kd_det_low", "kd_reid", "both", "kd_reid_weak", "kd_reid_strong")
ABLATION_COLUMNS = ("row", "seed", "backbone", "kd_mode", "lambda_oim", "teacher",
                    "search_map", "cmc_top1", "det_map", "det_recall")
LOW_LAMBDA = 0.1


class RunCache:
    """In-memory memo of finished runs; optionally mirrors each run to ``root/<key>``."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self._runs: dict[str, TrainResult] = {}

    @staticmethod
    def key(cfg: ExperimentConfig, teacher: Checkpoint | None, lut: LookupTable | None) -> str:
        parts = [cfg.digest()]
        parts.append(teacher.checksum()[:12] if teacher is not None else "-")
        parts.append(lut.checksum()[:12] if lut is not None else "-")
        return "_".join(parts)

    def run(self, cfg: ExperimentConfig, teacher: Checkpoint | None = None,
            lut: LookupTable | None = None) -> TrainResult:
        teacher = teacher if cfg.kd_mode.uses_det else None
        lut = lut if cfg.kd_mode.uses_reid else None
        k = self.key(cfg, teacher, lut)
        if k not in self._runs:
            logger.info("training %s (kd=%s, lambda=%s, seed=%d)", k, cfg.kd_mode.value,
                        cfg.oim.lambda_oim, cfg.seed)
            out = self.root / k if self.root is not None else None
            self._runs[k] = train(cfg, teacher=teacher, teacher_lut=lut, out_dir=out)
        return self._runs[k]

    def results(self) -> list[TrainResult]:
        return list(self._runs.values())

    def __len__(self):
        return len(self._runs)


def _metric_row(result: TrainResult) -> dict:
    m = result.metrics
    return {"search_map": m.search_map, "cmc_top1": m.cmc_top1, "det_map": m.det_map,
            "det_recall": m.det_recall}


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# lambda sweep

@dataclass
class SweepResult:
    rows: list[dict] = field(default_factory=list)  # one per (lambda, seed); lambda 0 is the detector

    def lambdas(self) -> list[float]:
        return sorted({r["lambda_oim"] for r in self.rows})

    def seeds(self) -> list[int]:
        return sorted({r["seed"] for r in self.rows})

    def values(self, lam: float, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.rows if r["lambda_oim"] == lam])

    def median(self, lam: float, metric: str) -> float:
        return float(np.median(self.values(lam, metric)))

    def spearman(self, metric: str = "det_map", positive_only: bool = True) -> float:
        """Rank correlation of ``metric`` against lambda over every (lambda, seed) row."""
        rows = [r for r in self.rows if r["lambda_oim"] > 0 or not positive_only]
        rho = spearmanr([r["lambda_oim"] for r in rows], [r[metric] for r in rows]).statistic
        return float(rho)

    def to_csv(self) -> str:
        return _csv(SWEEP_COLUMNS, sorted(self.rows, key=lambda r: (r["lambda_oim"], r["seed"])))

    def plot_data(self) -> str:
        """Per-lambda mean and std of detection and search mAP (x axis = lambda_oim)."""
        out = []
        for lam in self.lambdas():
            d, s = self.values(lam, "det_map"), self.values(lam, "search_map")
            out.append({"lambda_oim": float(lam), "det_map_mean": float(d.mean()), "det_map_std": float(d.std()),
                        "search_map_mean": float(s.mean()), "search_map_std": float(s.std()),
                        "n_seeds": len(d)})
        cols = ("lambda_oim", "det_map_mean", "det_map_std", "search_map_mean", "search_map_std", "n_seeds")
        return _csv(cols, out)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(self.to_csv())
        (out / "sweep_plot.csv").write_text(self.plot_data())


def lambda_sweep(config: ExperimentConfig, lambdas=DEFAULT_LAMBDAS, seeds=DEFAULT_SEEDS,
                 cache: RunCache | None = None, out_dir=None, include_detector: bool = True) -> SweepResult:
    """Train joint models (no KD) at every lambda and seed; lambda 0 adds the pure detector."""
    lambdas = [float(x) for x in lambdas]
    if not lambdas:
        raise ValueError("lambda list is empty")
    if any(x < 0 for x in lambdas):
        raise ValueError(f"lambda_oim values must be non-negative, got {lambdas}")
    if len(seeds) < 3:
        logger.warning("lambda sweep with %d seed(s); 3 or more are recommended", len(seeds))
    cache = cache if cache is not None else RunCache()
    grid = sorted(set(lambdas) | ({0.0} if include_detector else set()))
    result = SweepResult()
    for seed in seeds:
        for lam in grid:
            cfg = config.replace(**{"seed": seed, "kd_mode": KdMode.NONE, "oim.lambda_oim": lam})
            result.rows.append({"lambda_oim": lam, "seed": seed, **_metric_row(cache.run(cfg))})
    if out_dir is not None:
        result.write(out_dir)
    return result


# ---------------------------------------------------------------------------
# teachers and the ablation table

@dataclass
class Teachers:
    """Teacher checkpoints for one seed; any may be None, which skips the rows needing it."""
    detector: Checkpoint | None = None  # pure detector (lambda 0), for KD_det
    joint: Checkpoint | None = None  # converged joint model, source of the KD_reid LUT
    strong: Checkpoint | None = None  # joint model trained twice as long
    weak: Checkpoint | None = None  # SMALL-backbone joint model

    @classmethod
    def load(cls, **paths) -> "Teachers":
        return cls(**{k: load_checkpoint(v) if v else None for k, v in paths.items()})


def joint_config(base: ExperimentConfig, seed: int, backbone: BackboneSize | None = None,
                 steps_scale: float = 1.0) -> ExperimentConfig:
    return base.replace(**{"seed": seed, "kd_mode": KdMode.NONE, "oim.lambda_oim": 1.0,
                           "backbone": backbone or base.backbone,
                           "train.steps": int(round(base.train.steps * steps_scale))})


def train_teachers(base: ExperimentConfig, seed: int, cache: RunCache | None = None,
                   backbone: BackboneSize = BackboneSize.LARGE) -> Teachers:
    """Detector, joint, strong (2x steps) and weak (SMALL) teachers for one seed."""
    cache = cache if cache is not None else RunCache()
    det = base.replace(**{"seed": seed, "kd_mode": KdMode.NONE, "oim.lambda_oim": 0.0, "backbone": backbone})
    return Teachers(
        detector=cache.run(det).checkpoint,
        joint=cache.run(joint_config(base, seed, backbone)).checkpoint,
        strong=cache.run(joint_config(base, seed, backbone, steps_scale=2.0)).checkpoint,
        weak=cache.run(joint_config(base, seed, BackboneSize.SMALL)).checkpoint,
    )


@dataclass
class AblationTable:
    rows: list[dict] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def get(self, name: str, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.rows if r["row"] == name])

    def median(self, name: str, metric: str) -> float:
        v = self.get(name, metric)
        return float(np.median(v)) if len(v) else float("nan")

    def to_csv(self) -> str:
        return _csv(ABLATION_COLUMNS, self.rows)

    def summary(self) -> str:
        lines = [f"{'row':<16}{'search mAP':>12}{'top-1':>8}{'det mAP':>10}{'recall':>8}"]
        for name in ABLATION_ROWS:
            if len(self.get(name, "det_map")):
                lines.append(f"{name:<16}{self.median(name, 'search_map'):>12.4f}"
                             f"{self.median(name, 'cmc_top1'):>8.4f}{self.median(name, 'det_map'):>10.4f}"
                             f"{self.median(name, 'det_recall'):>8.4f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(self.to_csv())
        (out / "ablation_summary.txt").write_text(self.summary())


def ablation_plan(base: ExperimentConfig, seed: int) -> dict[str, tuple[ExperimentConfig, str]]:
    """Row name -> (config, teacher slot)."""
    def mk(mode, lam):
        return base.replace(**{"seed": seed, "kd_mode": mode, "oim.lambda_oim": lam})
    return {
        "baseline": (mk(KdMode.NONE, 1.0), ""),
        "kd_det": (mk(KdMode.KD_DET, 1.0), "detector"),
        "kd_det_low": (mk(KdMode.KD_DET, LOW_LAMBDA), "detector"),
        "kd_reid": (mk(KdMode.KD_REID, None), "joint"),
        "both": (mk(KdMode.BOTH, None), "detector+joint"),
        "kd_reid_weak": (mk(KdMode.KD_REID, None), "weak"),
        "kd_reid_strong": (mk(KdMode.KD_REID, None), "strong"),
    }


def run_ablation_suite(base: ExperimentConfig, seeds=DEFAULT_SEEDS, teachers=None,
                       rows=ABLATION_ROWS, cache: RunCache | None = None, out_dir=None) -> AblationTable:
    """Table-1 style rows for ``base.backbone``.

    ``teachers`` maps seed -> Teachers (or is one Teachers used for every seed).
    By default teachers are trained per seed with a LARGE backbone, which makes
    a SMALL ``base`` the compression setting. Rows whose teacher is missing are
    skipped and reported in ``table.skipped``.
    """
    cache = cache if cache is not None else RunCache()
    table = AblationTable()
    for seed in seeds:
        if teachers is None:
            ts = train_teachers(base, seed, cache)
        elif isinstance(teachers, Teachers):
            ts = teachers
        else:
            ts = teachers.get(seed, Teachers())
        for name, (cfg, slot) in ablation_plan(base, seed).items():
            if name not in rows:
                continue
            det_t = ts.detector if "detector" in slot else None
            lut_t = getattr(ts, slot.split("+")[-1]) if cfg.kd_mode.uses_reid else None
            missing = [s for s, t in (("detector", det_t if cfg.kd_mode.uses_det else 0),
                                      (slot.split("+")[-1], lut_t if cfg.kd_mode.uses_reid else 0)) if t is None]
            if missing:
                msg = f"seed {seed}: row {name} skipped, missing {' and '.join(missing)} teacher"
                logger.warning(msg)
                table.skipped.append(msg)
                continue
            result = cache.run(cfg, teacher=det_t, lut=lut_t.lut if lut_t is not None else None)
            table.rows.append({"row": name, "seed": seed, "backbone": cfg.backbone.value,
                               "kd_mode": cfg.kd_mode.value, "lambda_oim": result.checkpoint.oim_cfg.lambda_oim,
                               "teacher": slot or "-", **_metric_row(result)})
    if out_dir is not None:
        table.write(out_dir)
    return table


# ---------------------------------------------------------------------------
# LUT files

def export_lut(checkpoint, path) -> LookupTable:
    """Write a checkpoint's LUT (Checkpoint or checkpoint path) to a LUT file."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    write_lut(ckpt.lut, path)
    return ckpt.lut


def import_lut(path, dim: int | None = None, num_labeled: int | None = None) -> LookupTable:
    """Read a LUT file, rejecting a bad version or a D / P other than the expected one."""
    lut = read_lut(path) if not isinstance(path, (bytes, bytearray)) else lut_from_bytes(path)
    if dim is not None and lut.dim != dim:
        raise ValueError(f"LUT has D={lut.dim}, student embeds into D={dim}")
    if num_labeled is not None and lut.num_labeled != num_labeled:
        raise ValueError(f"LUT has P={lut.num_labeled} identities, student expects P={num_labeled}")
    return lut
