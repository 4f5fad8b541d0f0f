"""Acceptance criteria 1-9; each test prints one PASS/FAIL line."""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from uniabg.apv import ChannelStats, RasterImage, color_transfer, image_stats, lab_to_rgb, rgb_to_lab, transfer_lab
from uniabg.cluster import dbscan
from uniabg.config import PipelineConfig
from uniabg.evalkit import average_precision, recall_at_k
from uniabg.hgfc import consistency_scores, mutual_filter, topk_neighbors
from uniabg.losses import finite_diff_check
from uniabg.pipeline import DRONE_TO_SAT, SAT_TO_DRONE, cmd_sweep, pipeline_report, synthetic_dataset

import gradcases
import oracles
from hgfccases import random_instance
from test_evalkit import FIXED_CASES
from test_hgfc import candidate_tuples, vote_matches_brute

SEEDS = range(5)


@pytest.fixture
def verdict(capsys):
    def emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return emit


def _dbscan_instance(rng):
    n, d = int(rng.integers(1, 301)), int(rng.integers(2, 17))
    centres = oracles.unit_rows(rng, int(rng.integers(1, 8)), d)
    x = centres[rng.integers(len(centres), size=n)] + rng.uniform(0.02, 0.4) * rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x, float(rng.uniform(0.01, 0.6)), int(rng.integers(1, 11))


def test_1_dbscan_oracle_equivalence(verdict):
    rng = np.random.default_rng(2024)
    elapsed, mismatches = 0.0, 0
    for _ in range(100):
        x, eps, m = _dbscan_instance(rng)
        start = time.perf_counter()
        got = dbscan(x, eps, m)
        elapsed += time.perf_counter() - start
        mismatches += oracles.partition(got.tolist()) != oracles.partition(oracles.textbook_dbscan(x, eps, m))
    verdict(1, mismatches == 0 and elapsed < 5.0,
            f"{100 - mismatches}/100 instances match the textbook reference; dbscan time {elapsed:.2f} s (< 5 s)")


def test_2_gradient_suite(verdict):
    worst = {}
    for name, build in gradcases.CASES.items():
        rng = np.random.default_rng(31)
        worst[name] = max(
            finite_diff_check(*build(rng), gradcases.FD_STEP, order=gradcases.FD_ORDER) for _ in range(100)
        )
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, max(worst.values()) < 1e-4, f"max relative error over 100 points each: {detail}")


def test_3_color_transfer(verdict):
    rng = np.random.default_rng(77)
    images = [RasterImage(rng.integers(0, 256, size=(16, 12, 3), dtype=np.uint8)) for _ in range(20)]
    self_err = max(
        int(np.abs(color_transfer(im, image_stats(rgb_to_lab(im))).pixels.astype(int) - im.pixels).max())
        for im in images
    )
    stat_err = 0.0
    for im in images:
        target = ChannelStats(rng.normal([-0.5, 0.0, 0.0], [0.3, 0.05, 0.05]), rng.uniform(0.01, 0.4, 3))
        out = transfer_lab(rgb_to_lab(im), target)
        for c in range(3):
            mu, sd = oracles.population_stats(out[..., c].ravel())
            stat_err = max(stat_err, abs(mu - target.mean[c]), abs(sd - target.std[c]))
    trip_err = max(int(np.abs(lab_to_rgb(rgb_to_lab(im)).pixels.astype(int) - im.pixels).max()) for im in images)
    verdict(3, self_err <= 1 and stat_err < 1e-6 and trip_err <= 1,
            f"(a) self-transfer max diff {self_err}; (b) pre-clip stats error {stat_err:.1e}; "
            f"(c) round-trip max diff {trip_err}")


def test_4_hgfc_oracle_equivalence(verdict):
    rng = np.random.default_rng(404)
    filt_ok = vote_ok = 0
    for _ in range(50):
        inst = random_instance(rng)
        g_ru, g_pu = topk_neighbors(inst["sim_ru"], inst["k"]), topk_neighbors(inst["sim_pu"], inst["k"])
        scores = consistency_scores(g_ru, g_pu, inst["k"], inst["sim_ru"].shape[1])
        cands = mutual_filter(g_ru, g_pu, scores, inst["threshold"])
        want, _ = oracles.brute_candidates(inst["sim_ru"].tolist(), inst["sim_pu"].tolist(), inst["k"], inst["threshold"])
        filt_ok += candidate_tuples(cands) == want
        vote_ok += all(vote_matches_brute(cands, inst["sat_labels"], inst["drone_labels"], mode)
                       for mode in ("instance", "cluster"))
    verdict(4, filt_ok == 50 and vote_ok == 50,
            f"mutual_filter exact on {filt_ok}/50, weighted_vote (both modes) exact on {vote_ok}/50")


@pytest.fixture(scope="module")
def ablation():
    start = time.perf_counter()
    reports = []
    for seed in SEEDS:
        cfg = PipelineConfig(seed=seed)
        reports.append(pipeline_report(synthetic_dataset(cfg), cfg, ablation=True))
    return reports, time.perf_counter() - start


def test_5_ablation_direction(verdict, ablation):
    reports, elapsed = ablation

    def mean(name, get):
        return float(np.mean([get(next(r for r in rep["ablation"] if r["name"] == name)) for rep in reports]))

    acc = lambda row: row["association_accuracy"]["accuracy"]
    r1 = lambda row: row["retrieval"][DRONE_TO_SAT]["R@1"]
    acc_b, acc_h = mean("B", acc), mean("B+HGFC", acc)
    r1_h, r1_v = mean("B+HGFC", r1), mean("B+HGFC+VAAB", r1)
    verdict(5, acc_h > acc_b and r1_v >= r1_h and elapsed < 300,
            f"association accuracy B {acc_b:.4f} < B+HGFC {acc_h:.4f}; D->S R@1 B+HGFC {r1_h:.4f} <= "
            f"B+HGFC+VAAB {r1_v:.4f}; ablation over 5 seeds took {elapsed:.1f} s")


def test_6_bridging_lowers_view_probe(verdict, ablation):
    reports, _ = ablation
    pairs = [(rep["raw_probe_accuracy"], rep["result"]["probe_accuracy"]) for rep in reports]
    lower = sum(after < raw for raw, after in pairs)
    shown = ", ".join(f"{raw:.3f}->{after:.3f}" for raw, after in pairs)
    verdict(6, lower >= 4, f"probe lower after stage 1 in {lower}/5 seeds (raw->trained: {shown})")


def test_7_metric_exactness(verdict):
    worst = 0.0
    for ranking, rel, recalls, ap in FIXED_CASES:
        ranking = np.array(ranking)
        worst = max(worst, abs(average_precision(ranking, rel) - ap))
        worst = max([worst] + [abs(recall_at_k(ranking, rel, k) - v) for k, v in recalls.items()])
    multi = average_precision(np.array([[0, 1, 2, 3]]), [{0, 2}])
    verdict(7, worst < 1e-9 and abs(multi - 5 / 6) < 1e-9,
            f"{len(FIXED_CASES)} fixed cases, max error {worst:.1e}; ranks 1,3 AP = {multi:.5f}")


def test_8_sweep_harness(verdict, tmp_path):
    cfg = PipelineConfig(seed=0)
    data = synthetic_dataset(cfg)
    k_table = cmd_sweep(cfg, "k", tmp_path, data=data)
    lam_table = cmd_sweep(cfg, "lambda", tmp_path, data=data)
    shapes = ([r["k"] for r in k_table["rows"]] == [1, 2, 3, 4]
              and [r["lambda"] for r in lam_table["rows"]] == [round(0.1 * i, 1) for i in range(1, 11)])
    csv_rows = [len((tmp_path / f"sweep_{p}.csv").read_text().splitlines()) - 1 for p in ("k", "lambda")]
    verdict(8, shapes and csv_rows == [4, 10],
            f"k sweep {len(k_table['rows'])} rows, lambda sweep {len(lam_table['rows'])} rows; "
            f"D->S R@1 spread over k in 1..4 = {k_table['d2s_R@1_spread']:.4f} (reported, not asserted)")


def _cli_pipeline(root: Path, threads: str, tag: str) -> bytes:
    cfg = root / "cfg.json"
    out = root / tag
    env = {**os.environ, "UNIABG_THREADS": threads}
    subprocess.run([sys.executable, "-m", "uniabg", "pipeline", "--config", str(cfg), "--out", str(out)],
                   check=True, env=env, capture_output=True)
    return (out / "report.json").read_bytes()


def test_9_determinism(verdict, tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"paths": {"data_dir": str(tmp_path / "data")}, "seed": 3}))
    subprocess.run([sys.executable, "-m", "uniabg", "synth", "--config", str(tmp_path / "cfg.json")],
                   check=True, capture_output=True)
    runs = {
        "threads=1 #1": _cli_pipeline(tmp_path, "1", "a"),
        "threads=1 #2": _cli_pipeline(tmp_path, "1", "b"),
        "threads=4": _cli_pipeline(tmp_path, "4", "c"),
    }
    same = len(set(runs.values())) == 1
    verdict(9, same, f"report.json byte-identical across {', '.join(runs)}: {same}")
