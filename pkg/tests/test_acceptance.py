"""Trend-level and contract acceptance checks on the default synthetic dataset.

Training runs are shared through one session cache: the lambda = 1 sweep run
is also the baseline and the KD_reid teacher, the lambda = 0 run is the KD_det
teacher. A full pass trains roughly forty models (about 40 minutes on one core).
"""
import itertools
import time

import numpy as np
import pytest
import torch

import loss_cases
from oracles import ap_oracle, greedy_hits, oim_oracle, ranking_oracle, soft_ce_oracle
from psdistill.evaluation import GalleryScene, QueryCase, average_precision, query_ap
from psdistill.harness.checkpoint import checkpoint_from_bytes
from psdistill.harness.config import ExperimentConfig
from psdistill.harness.experiments import (RunCache, export_lut, import_lut, lambda_sweep, run_ablation_suite,
                                           train_teachers)
from psdistill.harness.train import train
from psdistill.kd import soft_cls_loss
from psdistill.oim import LookupTable, UnlabeledQueue, oim_forward
from psdistill.psmodel import BackboneSize

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
LAMBDAS = (0.05, 0.1, 0.3, 0.6, 1.0)
BASE = ExperimentConfig()


@pytest.fixture(scope="module")
def cache():
    return RunCache()


@pytest.fixture(scope="module")
def sweep(cache):
    t0 = time.perf_counter()
    res = lambda_sweep(BASE, LAMBDAS, SEEDS, cache=cache)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def teachers(cache, sweep):
    return {s: train_teachers(BASE, s, cache) for s in SEEDS}


@pytest.fixture(scope="module")
def large_table(cache, teachers):
    return run_ablation_suite(BASE, SEEDS, teachers=teachers, cache=cache,
                              rows=("baseline", "kd_det", "kd_reid", "kd_reid_weak", "kd_reid_strong"))


@pytest.fixture(scope="module")
def small_table(cache, teachers):
    small = BASE.replace(backbone=BackboneSize.SMALL)
    return run_ablation_suite(small, SEEDS, teachers=teachers, cache=cache, rows=("baseline", "kd_reid"))


def test_1_gradient_suite(report):
    cases = loss_cases.all_cases(16)
    t0 = time.perf_counter()
    errors = [loss_cases.check(name, seed) for name, seed in cases]
    elapsed = time.perf_counter() - t0
    ok = len(cases) >= 100 and max(errors) < 1e-4 and elapsed < 60
    assert report(1, ok, f"{len(cases)} cases over {len(loss_cases.LOSSES)} losses, max rel err "
                         f"{max(errors):.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


def _oim_errors():
    worst = 0.0
    for p, q, n in itertools.product(range(1, 6), range(0, 5), range(1, 6)):
        if p + q > 5:
            continue
        rng = np.random.default_rng([p, q, n])
        unit = lambda k: (lambda a: a / np.linalg.norm(a, axis=1, keepdims=True))(rng.normal(size=(k, 3)))  # noqa: E731
        V, U, X = unit(p), unit(q), unit(n)
        labels = [int(v) for v in rng.integers(-1, p, size=n)]
        lut, queue = LookupTable(V.T), UnlabeledQueue(3, q)
        for u in U:
            queue.enqueue(u)
        loss, probs = oim_forward(torch.as_tensor(X), labels, lut, queue, 0.1)
        ref_loss, ref_probs = oim_oracle(X.tolist(), labels, lut.V.T.astype(float).tolist(),
                                         queue.active().T.astype(float).tolist(), 0.1)
        worst = max(worst, abs(float(loss) - ref_loss), float(np.abs(probs.numpy() - np.array(ref_probs)).max()))
    return worst


def _soft_ce_errors():
    worst = 0.0
    for n, c in itertools.product(range(1, 6), range(2, 6)):
        rng = np.random.default_rng([n, c])
        s, t = rng.normal(size=(n, c)) * 5, rng.normal(size=(n, c)) * 5
        for temp in (1.0, 10.0):
            out = float(soft_cls_loss(torch.as_tensor(s), torch.as_tensor(t), temp))
            worst = max(worst, abs(out - soft_ce_oracle(s.tolist(), t.tolist(), temp)))
    return worst


def _metric_errors():
    worst = 0.0
    for n in range(1, 6):
        for bits in itertools.product([False, True], repeat=n):
            for extra in (0, 1):
                worst = max(worst, abs(average_precision(np.array(bits), sum(bits) + extra)
                                       - ap_oracle(list(bits), sum(bits) + extra)))
    # every gallery of up to 5 detections with every hit pattern, scores with ties
    for n in range(1, 6):
        rng = np.random.default_rng(n)
        for bits in itertools.product([False, True], repeat=n):
            if not any(bits):
                continue
            sims = np.round(rng.uniform(-1, 1, size=n), 1)
            boxes = np.array([[20.0 * i, 0, 20.0 * i + 10, 20] for i in range(n)])
            gt = boxes[np.array(bits)]
            emb = np.stack([sims, np.sqrt(1 - sims ** 2)], axis=1)
            case = QueryCase(0, np.array([1.0, 0.0]), [GalleryScene(boxes, emb, gt)])
            hits = greedy_hits(ranking_oracle(list(sims)), boxes.tolist(), gt.tolist())
            ap, top1 = query_ap(case)
            worst = max(worst, abs(ap - ap_oracle(hits, len(gt))), float(top1 != hits[0]))
    return worst


def test_2_oracle_suite(report):
    errs = {"oim_forward": _oim_errors(), "soft_cls_loss": _soft_ce_errors(), "AP/CMC": _metric_errors()}
    ok = max(errs.values()) <= 1e-9
    assert report(2, ok, ", ".join(f"{k} max err {v:.1e}" for k, v in errs.items()) + " (<= 1e-9)")


def test_3_kd_reid_contract(report, cache, large_table, small_table):
    # only KD_reid students carry a frozen table
    runs = [r for r in cache.results() if r.checkpoint.lut.frozen]
    bad = [r for r in runs if r.lut_checksum_start != r.lut_checksum_end
           or r.checkpoint.lut.skipped_updates != r.labeled_seen]
    ok = bool(runs) and not bad
    assert report(3, ok, f"{len(runs)} KD_reid runs, {len(bad)} with a changed LUT or skip count != labeled seen")


def test_4_lambda_sweep(report, sweep):
    res, elapsed = sweep
    rho = res.spearman("det_map")
    det0 = res.median(0.0, "det_map")
    meds = {lam: res.median(lam, "det_map") for lam in LAMBDAS}
    below = all(m < det0 for m in meds.values())
    ok = rho <= -0.8 and below and elapsed < 1800
    curve = " ".join(f"{lam}:{m:.3f}" for lam, m in meds.items())
    assert report(4, ok, f"spearman {rho:.2f} (<= -0.8); det mAP median lambda 0: {det0:.3f}, {curve} "
                         f"(all below: {below}); sweep {elapsed / 60:.1f} min (< 30)")


def test_5_kd_reid_beats_baseline(report, large_table):
    d_s = large_table.median("kd_reid", "search_map") - large_table.median("baseline", "search_map")
    d_d = large_table.median("kd_reid", "det_map") - large_table.median("baseline", "det_map")
    ok = d_s >= 0.02 and d_d >= 0.02
    assert report(5, ok, f"KD_reid@0.1 minus baseline@1: search {100 * d_s:+.1f}, det {100 * d_d:+.1f} points "
                         f"(both >= +2)")


def test_6_kd_det(report, large_table):
    d_s = large_table.median("kd_det", "search_map") - large_table.median("baseline", "search_map")
    d_d = large_table.median("kd_det", "det_map") - large_table.median("baseline", "det_map")
    ok = d_d >= 0.01 and abs(d_s) <= 0.015
    assert report(6, ok, f"KD_det@1 minus baseline: det {100 * d_d:+.1f} (>= +1), search {100 * d_s:+.1f} "
                         f"(within +-1.5) points")


def test_7_compression(report, large_table, small_table):
    d_s = small_table.median("kd_reid", "search_map") - small_table.median("baseline", "search_map")
    d_d = small_table.median("kd_reid", "det_map") - small_table.median("baseline", "det_map")
    gap = small_table.median("kd_reid", "search_map") - large_table.median("baseline", "search_map")
    ok = d_s >= 0.03 and d_d >= 0.03 and gap >= -0.01
    assert report(7, ok, f"SMALL KD_reid minus SMALL baseline: search {100 * d_s:+.1f}, det {100 * d_d:+.1f} "
                         f"(both >= +3); minus LARGE baseline search {100 * gap:+.1f} (>= -1) points")


def test_8_teacher_quality(report, large_table):
    weak = large_table.median("kd_reid_weak", "search_map")
    strong = large_table.median("kd_reid_strong", "search_map")
    assert report(8, weak < strong, f"KD_reid search mAP from weak teacher {weak:.3f} vs strong teacher {strong:.3f}")


def test_9_determinism(report):
    cfg = BASE.replace(**{"train.steps": 40, "seed": 5})
    a, b = train(cfg), train(cfg)
    ok = a.metrics.to_csv() == b.metrics.to_csv() and a.checkpoint.to_bytes() == b.checkpoint.to_bytes() \
        and a.losses_csv() == b.losses_csv()
    assert report(9, ok, "two runs of one (config, seed): metric CSV, loss CSV and checkpoint bytes identical")


def test_10_serialization(report, tmp_path, teachers):
    ckpt = teachers[0].joint
    raw = ckpt.to_bytes()
    ck_ok = checkpoint_from_bytes(raw).to_bytes() == raw
    export_lut(ckpt, tmp_path / "a.olut")
    lut = import_lut(tmp_path / "a.olut", dim=ckpt.lut.dim, num_labeled=ckpt.lut.num_labeled)
    export_lut(checkpoint_from_bytes(raw), tmp_path / "b.olut")
    lut_ok = lut.to_bytes() == ckpt.lut.to_bytes() == (tmp_path / "b.olut").read_bytes()
    rejected = 0
    for kw in ({"dim": ckpt.lut.dim + 1}, {"num_labeled": ckpt.lut.num_labeled - 1}):
        try:
            import_lut(tmp_path / "a.olut", **kw)
        except ValueError:
            rejected += 1
    ok = ck_ok and lut_ok and rejected == 2
    assert report(10, ok, f"checkpoint round trip {ck_ok}, LUT round trip {lut_ok}, mismatched imports "
                          f"rejected {rejected}/2")
