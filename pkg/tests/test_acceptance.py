"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; conftest.py repeats them in the terminal
summary so they survive output capturing.  The three training comparisons
share session-scoped experiment runs.
"""

import json
import math
import time

import numpy as np
import pytest

from poscl.cli import main as cli_main
from poscl.experiment import ExperimentSpec, analyze_false_negatives, run_experiment
from poscl.loss import LossConfig, pcl_loss
from poscl.autodiff import Tensor
from poscl.pairing import (
    PairMask,
    build_gcl_mask,
    build_position_mask,
    build_simclr_mask,
    false_negative_stats,
)
from poscl.volume_data import generate_synthetic_volume

from gradcheck_utils import SMALL, contrastive_program, segmentation_program, smooth_point, worst_param_error

RESULTS = []
PRETRAIN_LABEL_READS = []

SEEDS = (0, 1, 2)
FOLDS = 5
VOLUMES = 20


def criterion(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def pooled_se(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return math.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))


# -- shared runs -------------------------------------------------------------------


@pytest.fixture(scope="session")
def family_a():
    return [generate_synthetic_volume("A", s) for s in range(VOLUMES)]


@pytest.fixture(scope="session")
def family_b():
    return [generate_synthetic_volume("B", 1000 + s) for s in range(VOLUMES)]


def _run(spec, **kw):
    report = run_experiment(spec, **kw)
    PRETRAIN_LABEL_READS.append(report.label_reads)
    return report


@pytest.fixture(scope="session")
def semi_supervised_m2(family_a):
    spec = ExperimentSpec(strategies=("pcl", "simclr", "random"), m_list=(2,), folds=FOLDS, seeds=SEEDS)
    return _run(spec, volumes=family_a)


@pytest.fixture(scope="session")
def semi_supervised_m8(family_a):
    spec = ExperimentSpec(strategies=("pcl", "random"), m_list=(8,), folds=FOLDS, seeds=SEEDS)
    return _run(spec, volumes=family_a)


@pytest.fixture(scope="session")
def transfer_a_to_b(family_a, family_b):
    spec = ExperimentSpec(strategies=("pcl", "random"), m_list=(2,), folds=FOLDS, seeds=SEEDS)
    return _run(spec, volumes=family_b, pretrain_volumes=family_a)


# -- 1-5: exact properties -----------------------------------------------------------


def literal_loss(Z, positive, tau):
    """Scalar transcription of the per-anchor loss, one term at a time."""
    n = len(Z)
    norms = [math.sqrt(sum(x * x for x in row)) for row in Z]

    def sim(i, j):
        return sum(a * b for a, b in zip(Z[i], Z[j])) / (norms[i] * norms[j])

    total = 0.0
    for i in range(n):
        omega = [j for j in range(n) if positive[i][j]]
        if not omega:
            continue
        denom = sum(math.exp(sim(i, k) / tau) for k in range(n) if k != i)
        li = 0.0
        for j in omega:
            li += -math.log(math.exp(sim(i, j) / tau) / denom)
        total += li / len(omega)
    return total


def test_criterion_01_loss_oracle():
    rng = np.random.default_rng(20240601)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        two_n = 2 * int(rng.integers(2, 17))
        d = int(rng.integers(4, 65))
        tau = float(rng.choice([0.05, 0.1, 1.0]))
        Z = rng.normal(size=(two_n, d))
        mask = build_position_mask(np.repeat(rng.uniform(0, 1, two_n // 2), 2), float(rng.uniform(0.02, 0.5)))
        got = pcl_loss(Tensor(Z), mask, LossConfig(tau)).total
        want = literal_loss(Z.tolist(), mask.positive.tolist(), tau)
        worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - start
    criterion(1, worst <= 1e-10 and elapsed < 10,
              f"loss oracle max |diff| {worst:.2e} (<= 1e-10) over 100 configs in {elapsed:.2f}s (< 10s)")


def test_criterion_02_closed_forms():
    pair = pcl_loss(Tensor(np.array([[1.0, 2.0, 0.5], [-0.3, 0.1, 2.0]])), build_simclr_mask(1)).total
    same = np.tile(np.array([[0.6, 0.8]]), (8, 1))
    everyone = PairMask(~np.eye(8, dtype=bool))
    eight = pcl_loss(Tensor(same), everyone).total
    ok = abs(pair) <= 1e-12 and abs(eight - 8 * math.log(7)) <= 1e-9
    criterion(2, ok, f"2N=2 loss {pair:.3e} (0 +- 1e-12); 2N=8 loss {eight:.9f} vs 8 ln 7 = {8 * math.log(7):.9f}")


def test_criterion_03_gradients():
    start = time.perf_counter()
    worst = 0.0
    for s in range(20):
        params, images, rng = smooth_point(500 + s)
        positions = np.repeat(rng.uniform(0, 1, len(images) // 2), 2)
        enc_proj = params.group("enc.") + params.group("proj.")
        worst = max(worst, worst_param_error(contrastive_program(params, images, positions), params, enc_proj))
        labels = rng.integers(0, SMALL.num_classes, size=(len(images), *SMALL.input_hw))
        enc_dec = params.group("enc.") + params.group("dec.")
        worst = max(worst, worst_param_error(segmentation_program(params, images, labels), params, enc_dec))
    elapsed = time.perf_counter() - start
    criterion(3, worst < 1e-5 and elapsed < 60,
              f"grad_check worst relative error {worst:.2e} (< 1e-5) at 20 points in {elapsed:.1f}s (< 60s)")


def _pairs(mask):
    return {(int(i), int(j)) for i, j in zip(*np.nonzero(mask.positive))}


def test_criterion_04_mask_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    checks = {}
    masks = []
    for _ in range(50):
        p = rng.uniform(0, 1, 12)
        masks += [build_position_mask(p, 0.15), build_gcl_mask(p, 4), build_simclr_mask(6)]
    checks["symmetric"] = all((m.positive == m.positive.T).all() for m in masks)
    checks["irreflexive"] = all(not m.positive.diagonal().any() for m in masks)
    p = rng.uniform(0, 1, 30)
    ts = [0.01, 0.05, 0.1, 0.2, 0.5, 0.9]
    checks["monotone in t"] = all(
        _pairs(build_position_mask(p, a)) <= _pairs(build_position_mask(p, b)) for a, b in zip(ts, ts[1:])
    )
    checks["strict < at tie"] = (
        _pairs(build_position_mask([0.25, 0.5], 0.25)) == set()
        and _pairs(build_position_mask([0.25, 0.5], 0.2500001)) == {(0, 1), (1, 0)}
    )
    triple = _pairs(build_position_mask([0.0, 0.08, 0.16], 0.1))
    checks["non-transitive"] = triple == {(0, 1), (1, 0), (1, 2), (2, 1)}
    boundary = build_gcl_mask([0.24, 0.26], 4)
    stats = false_negative_stats(boundary, [0.24, 0.26], 0.1)
    checks["GCL boundary FN"] = _pairs(boundary) == set() and stats["false_neg_count"] == 2
    elapsed = time.perf_counter() - start
    failed = [k for k, v in checks.items() if not v]
    criterion(4, not failed and elapsed < 1,
              f"mask suite {len(checks) - len(failed)}/{len(checks)} checks in {elapsed * 1000:.0f}ms (< 1s)"
              + (f"; failed: {failed}" if failed else ""))


def test_criterion_05_false_negative_ordering():
    vols = [generate_synthetic_volume("A", s) for s in range(2)]
    vols = [type(v)(v.intensities[:, :, :20], v.spacing, v.volume_id, v.family_id, v.num_classes) for v in vols]
    stats = analyze_false_negatives(vols, t_true=0.1, strategies=("pcl", "gcl", "simclr"), t=0.1, partitions=4)

    # independent enumeration over all ordered pairs of the 80 views
    p = np.repeat([m / 20 for m in range(20)] * 2, 2)
    n = len(p)
    twin = np.arange(n) // 2
    counts = {"pcl": 0, "gcl": 0, "simclr": 0}
    for i in range(n):
        for j in range(n):
            if i == j or not abs(p[i] - p[j]) < 0.1:
                continue
            counts["pcl"] += not abs(p[i] - p[j]) < 0.1
            counts["gcl"] += min(int(p[i] * 4), 3) != min(int(p[j] * 4), 3)
            counts["simclr"] += twin[i] != twin[j]
    got = {k: v["false_neg_count"] for k, v in stats.items()}
    ok = got == counts and got["pcl"] == 0 < got["gcl"] < got["simclr"]
    criterion(5, ok, f"false negatives PCL {got['pcl']} < GCL {got['gcl']} < SimCLR {got['simclr']} "
                     f"(enumeration {counts['pcl']}/{counts['gcl']}/{counts['simclr']})")


# -- 6-10: training comparisons ---------------------------------------------------


def test_criterion_06_semi_supervised(semi_supervised_m2):
    r = semi_supervised_m2
    pcl, sim, rnd = (r.dice_values(s, 2) for s in ("pcl", "simclr", "random"))
    se_sim, se_rnd = pooled_se(pcl, sim), pooled_se(pcl, rnd)
    gap_sim, gap_rnd = np.mean(pcl) - np.mean(sim), np.mean(pcl) - np.mean(rnd)
    ok = len(pcl) == FOLDS * len(SEEDS) and gap_sim > se_sim and gap_rnd > se_rnd and r.wall_clock < 900
    criterion(6, ok,
              f"M=2 Dice PCL {np.mean(pcl):.3f} SimCLR {np.mean(sim):.3f} Random {np.mean(rnd):.3f}; "
              f"PCL-SimCLR {gap_sim:+.3f} vs SE {se_sim:.3f}, PCL-Random {gap_rnd:+.3f} vs SE {se_rnd:.3f}; "
              f"{r.wall_clock:.0f}s (< 900s)")


def test_criterion_07_transfer(transfer_a_to_b):
    r = transfer_a_to_b
    pcl, rnd = r.dice_values("pcl", 2), r.dice_values("random", 2)
    gap = np.mean(pcl) - np.mean(rnd)
    ok = r.extra["transfer"] and gap > 0 and r.wall_clock < 900
    criterion(7, ok, f"A->B M=2 Dice PCL {np.mean(pcl):.3f} Random {np.mean(rnd):.3f} (gap {gap:+.3f} > 0); "
                     f"{r.wall_clock:.0f}s (< 900s)")


def test_criterion_08_diminishing_gain(semi_supervised_m2, semi_supervised_m8):
    def gap_by_seed(report, M):
        gaps = []
        for seed in SEEDS:
            def mean_for(strategy):
                return np.mean([row["dice"] for row in report.rows if row["strategy"] == strategy
                                and row["M"] == M and row["seed"] == seed and row["class"] == "mean"])
            gaps.append(mean_for("pcl") - mean_for("random"))
        return float(np.mean(gaps))

    g2, g8 = gap_by_seed(semi_supervised_m2, 2), gap_by_seed(semi_supervised_m8, 8)
    criterion(8, g2 > g8, f"PCL-Random gap at M=2 {g2:+.3f} > gap at M=8 {g8:+.3f}")


def test_criterion_09_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli_main(["generate-data", "--family", "A", "--volumes", "10", "--out", str(data)]) == 0
    args = ["compare", "--manifest", str(data / "manifest.json"), "--strategies", "pcl,gcl,simclr,random",
            "--m-list", "2", "--folds", "5", "--seeds", "0,1", "--pretrain-epochs", "2", "--finetune-epochs", "3"]
    codes = [cli_main(args + ["--out", str(tmp_path / f"run{i}.json")]) for i in (1, 2)]
    first, second = (tmp_path / "run1.csv").read_bytes(), (tmp_path / "run2.csv").read_bytes()
    for i in (1, 2):
        PRETRAIN_LABEL_READS.append(json.loads((tmp_path / f"run{i}.json").read_text())["label_reads"])
    rows = first.count(b"\n") - 1
    criterion(9, codes == [0, 0] and first == second and rows > 0,
              f"two compare runs gave byte-identical CSV ({rows} rows, {len(first)} bytes)")


def test_criterion_10_label_firewall(semi_supervised_m2, semi_supervised_m8, transfer_a_to_b):
    total = sum(PRETRAIN_LABEL_READS)
    runs = len(PRETRAIN_LABEL_READS)
    criterion(10, runs >= 3 and total == 0,
              f"pretraining label probe read {total} labels across {runs} experiment runs")
