"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The ML-100K criteria need ``data/ml-100k/u.data`` (or ``ICPNS_ML100K``) and
take roughly half an hour in total on one CPU; they are marked ``slow``.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import gradient_relative_error, random_interactions
from test_metrics import ref_ch, ref_metrics, ref_silhouette
from icpns import cli
from icpns.alias import build_alias, draw_alias
from icpns.community import CommunityModel, community_popularity, smooth_popularity
from icpns.config import parse_config
from icpns.encoder import build_graph_operator, init_embeddings
from icpns.metrics import calinski_harabasz, holdout_hit, ranking_metrics, silhouette
from icpns.pipeline import compare_strategies
from icpns.sampler import CommunitySampler, PopularitySampler

SEEDS = (0, 1, 2)
STRATEGIES = ("rns", "pns", "hns", "icpns")


def seeded(seed, *overrides):
    return list(overrides) + [f"seeds.{name}={seed}" for name in ("init", "split", "sampler", "clustering")]


def ml100k_config(path, seed, *overrides):
    return parse_config(None, seeded(seed, "data.source=raw", f"data.path={path}",
                                     "data.format=movielens-tab", *overrides))


def rows_by_strategy(report):
    return {row["strategy"]: row for row in report.rows}


@pytest.fixture(scope="session")
def lightgcn_runs(ml100k):
    """One four-way comparison per seed, sharing a Stage-1 checkpoint within each seed."""
    return {seed: compare_strategies(ml100k_config(ml100k, seed), STRATEGIES) for seed in SEEDS}


# 1 ------------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_c01_prep_fidelity(ml100k, tmp_path, capsys, acceptance):
    t0 = time.perf_counter()
    code = cli.main(["prep", str(ml100k), "--format", "movielens-tab", "--k", "10", "--seed", "0",
                     "--reference", "ml-100k", "--out", str(tmp_path / "prep")])
    seconds = time.perf_counter() - t0
    assert code == 0
    stats = json.loads(capsys.readouterr().out)
    delta = stats["delta"]
    worst = max(abs(d["relative"]) for d in delta.values())
    ok = worst < 0.01 and seconds < 5.0
    with capsys.disabled():
        acceptance(1, "prep fidelity", ok,
                   f"users {stats['n_users']}/940 items {stats['n_items']}/1017 nnz {stats['nnz']}/80393, "
                   f"max |relative delta| {worst:.4%} (< 1%), {seconds:.2f}s (< 5s)")
    assert ok


# 2 ------------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_c02_lightgcn_main_effect(lightgcn_runs, capsys, acceptance):
    rns = [rows_by_strategy(r)["rns"]["metrics"]["ndcg"] for r in lightgcn_runs.values()]
    icpns = [rows_by_strategy(r)["icpns"]["metrics"]["ndcg"] for r in lightgcn_runs.values()]
    gain = np.mean(icpns) / np.mean(rns) - 1.0
    budget = max(r.timing["stage1_seconds"] + max(r.timing["stage2_seconds"].values())
                 for r in lightgcn_runs.values())
    ok = gain >= 0.05 and budget <= 1800
    with capsys.disabled():
        acceptance(2, "LightGCN ICPNS vs RNS test NDCG@10", ok,
                   f"icpns {np.mean(icpns):.4f} rns {np.mean(rns):.4f} relative {gain:+.2%} (>= +5%), "
                   f"per-seed icpns {np.round(icpns, 4).tolist()} rns {np.round(rns, 4).tolist()}, "
                   f"max per-strategy wall {budget:.0f}s (<= 1800s)")
    assert ok


# 3 ------------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_c03_mf_parity(ml100k, capsys, acceptance):
    rns, icpns = [], []
    for seed in SEEDS:
        rows = rows_by_strategy(compare_strategies(ml100k_config(ml100k, seed, "model.backbone=mf"),
                                                   ["rns", "icpns"]))
        rns.append(rows["rns"]["metrics"]["recall"])
        icpns.append(rows["icpns"]["metrics"]["recall"])
    rel = np.mean(icpns) / np.mean(rns) - 1.0
    ok = abs(rel) <= 0.07
    with capsys.disabled():
        acceptance(3, "BPR-MF ICPNS vs RNS test Recall@10 parity", ok,
                   f"icpns {np.mean(icpns):.4f} rns {np.mean(rns):.4f} relative {rel:+.2%} (within +-7%)")
    assert ok


# 4 ------------------------------------------------------------------------------------------------

def test_c04_single_community_degenerates_to_pns(capsys, acceptance):
    gen = np.random.default_rng(2024)
    train = random_interactions(gen, 50, 40, 0.2)
    assign = np.zeros(50, dtype=np.int64)
    counts = community_popularity(assign, train, 1)
    community = CommunityModel(1, 0.1, 0, assign, np.zeros((1, 1)), counts, smooth_popularity(counts, 0.1))
    icpns = CommunitySampler(train, community)
    pns = PopularitySampler(train, alpha=0.1)
    analytic = max(float(np.abs(icpns.target_distribution(u) - pns.target_distribution(u)).max())
                   for u in range(50))

    users = np.random.default_rng(7).integers(0, 50, size=10 ** 5)
    a = icpns.sample(users, np.random.default_rng(99))
    b = pns.sample(users, np.random.default_rng(99))
    joint_a = np.bincount(users * 40 + a, minlength=50 * 40) / users.size
    joint_b = np.bincount(users * 40 + b, minlength=50 * 40) / users.size
    tv = 0.5 * float(np.abs(joint_a - joint_b).sum())
    ok = analytic == 0.0 and tv < 0.01
    with capsys.disabled():
        acceptance(4, "P=1 ICPNS equals PNS(alpha=0.1)", ok,
                   f"max |target difference| {analytic:.1e} (== 0), empirical TV {tv:.2e} over 1e5 draws (< 0.01)")
    assert ok


# 5 ------------------------------------------------------------------------------------------------

def _per_draw_seconds(table, rng, batch=10 ** 5, repeats=15):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        draw_alias(table, rng, batch)
        best = min(best, time.perf_counter() - t0)
    return best / batch


def test_c05_alias_exact_and_constant_time(capsys, acceptance):
    gen = np.random.default_rng(5)
    recon = 0.0
    for _ in range(1000):
        w = gen.random(int(gen.integers(1, 200))) * (gen.random() < 0.5 and 1e3 or 1.0)
        w[gen.random(w.size) < 0.2] = 0.0
        if w.sum() == 0:
            w[0] = 1.0
        recon = max(recon, float(np.abs(build_alias(w).probabilities() - w / w.sum()).max()))

    p = gen.dirichlet(np.ones(1000))
    n = 10 ** 6
    freq = np.bincount(draw_alias(build_alias(p), gen, n), minlength=1000) / n
    tv = 0.5 * float(np.abs(freq - p).sum())
    # exact reference sampler and the analytic expectation of the TV statistic under pure sampling noise
    ref = 0.5 * float(np.abs(np.bincount(gen.choice(1000, size=n, p=p), minlength=1000) / n - p).sum())
    floor = 0.5 * np.sqrt(2 / np.pi) * float(np.sqrt(p * (1 - p) / n).sum())

    small = build_alias(gen.random(10 ** 3) + 0.01)
    large = build_alias(gen.random(10 ** 5) + 0.01)
    ratio = _per_draw_seconds(large, gen) / _per_draw_seconds(small, gen)
    ok = recon < 1e-9 and tv < 0.005 and ratio < 3.0
    with capsys.disabled():
        acceptance(5, "alias reconstruction, accuracy and O(1) draws", ok,
                   f"max reconstruction error {recon:.1e} (< 1e-9), TV {tv:.4f} at 1e6 draws (< 0.005; "
                   f"numpy.choice gives {ref:.4f}, expected noise {floor:.4f}), "
                   f"latency ratio M=1e5/M=1e3 {ratio:.2f} (< 3)")
    assert ok


# 6 ------------------------------------------------------------------------------------------------

def test_c06_gradient_fidelity(capsys, acceptance):
    worst = {}
    for backbone, layers in (("mf", 0), ("lightgcn", 0), ("lightgcn", 1), ("lightgcn", 2), ("lightgcn", 3)):
        gen = np.random.default_rng(100 + layers + (backbone == "mf"))
        train = random_interactions(gen, 6, 7, 0.35)
        state = init_embeddings(6, 7, 3, seed=layers, scale=0.5)
        graph = build_graph_operator(train) if backbone == "lightgcn" else None
        errs = []
        for _ in range(100):
            u = int(gen.integers(6))
            i, j = gen.choice(7, size=2, replace=False)
            errs.append(gradient_relative_error(state, graph, u, int(i), int(j), 1e-2, layers))
        worst[f"{backbone}/K={layers}"] = max(errs)
    ok = max(worst.values()) < 1e-4
    with capsys.disabled():
        acceptance(6, "central-difference gradient check, 100 triplets per setting", ok,
                   ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (< 1e-4)")
    assert ok


# 7 ------------------------------------------------------------------------------------------------

def test_c07_metric_oracles(capsys, acceptance):
    gen = np.random.default_rng(77)
    rank_err = hold_err = sil_err = ch_err = 0.0
    for _ in range(200):
        m = int(gen.integers(2, 41))
        k = int(gen.integers(1, 11))
        order = gen.permutation(m)
        rel = set(gen.choice(m, size=int(gen.integers(1, m + 1)), replace=False).tolist())
        rank_err = max(rank_err, float(np.abs(np.subtract(ranking_metrics(order, rel, k),
                                                          ref_metrics(order.tolist(), rel, k))).max()))

        negs = {u: gen.choice(m, size=min(k, m), replace=False) for u in range(8)}
        vals = {u: gen.choice(m, size=int(gen.integers(0, m)), replace=False).tolist() for u in range(8)}
        expected = [len(set(negs[u].tolist()) & set(vals[u])) / k for u in range(8) if vals[u]]
        if expected:
            hold_err = max(hold_err, abs(holdout_hit(negs, vals, k) - float(np.mean(expected))))

        n = int(gen.integers(6, 31))
        c = int(gen.integers(2, min(5, n) + 1))
        lab = np.r_[np.arange(c), gen.integers(0, c, size=n - c)]
        x = gen.normal(size=(n, 3)) + lab[:, None]
        sil_err = max(sil_err, abs(silhouette(x, lab) - ref_silhouette(x, lab)))
        ch = ref_ch(x, lab)
        ch_err = max(ch_err, abs(calinski_harabasz(x, lab) - ch) / max(1.0, ch))

    ideal = all(ranking_metrics(np.arange(40), set(range(r)), k)[1] == 1.0
                for r in range(1, 15) for k in range(1, 12))
    ok = max(rank_err, hold_err, sil_err, ch_err) < 1e-9 and ideal
    with capsys.disabled():
        acceptance(7, "metric oracles on 200 random instances", ok,
                   f"ranking {rank_err:.1e}, holdout {hold_err:.1e}, silhouette {sil_err:.1e}, "
                   f"CH (relative) {ch_err:.1e} (< 1e-9); ideal NDCG exactly 1: {ideal}")
    assert ok


# 8 ------------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_c08_hardness_direction(lightgcn_runs, capsys, acceptance):
    per_seed = []
    for seed, report in lightgcn_runs.items():
        rows = rows_by_strategy(report)
        d_icpns, d_rns = rows["icpns"]["diagnostics"], rows["rns"]["diagnostics"]
        assert min(d_icpns["logged_negatives"], d_rns["logged_negatives"]) >= 10 ** 4
        per_seed.append((d_icpns["hardness_stage1_model"], d_rns["hardness_stage1_model"]))
    ok = all(a > b for a, b in per_seed)
    draws = min(r.rows[0]["diagnostics"]["logged_negatives"] for r in lightgcn_runs.values())
    with capsys.disabled():
        acceptance(8, "mean sigmoid score of ICPNS negatives above RNS", ok,
                   "per seed (icpns, rns) " + ", ".join(f"({a:.3f}, {b:.3f})" for a, b in per_seed)
                   + f", >= {draws} draws each under the shared Stage-1 model")
    assert ok


# 9 ------------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_c09_holdout_hit_ordering(lightgcn_runs, capsys, acceptance):
    values = {s: [rows_by_strategy(r)[s]["diagnostics"]["holdout_hit"] for r in lightgcn_runs.values()]
              for s in ("hns", "icpns", "rns")}
    mean = {s: float(np.mean(v)) for s, v in values.items()}
    ok = mean["hns"] > mean["icpns"] > mean["rns"]
    with capsys.disabled():
        acceptance(9, "HoldoutHit@10 ordering HNS > ICPNS > RNS", ok,
                   ", ".join(f"{s} {mean[s]:.4f} {np.round(values[s], 4).tolist()}" for s in mean)
                   + " (mean over 3 seeds)")
    assert ok


# 10 -----------------------------------------------------------------------------------------------

def test_c10_realness_on_synthetic_exposure(capsys, acceptance):
    margins = []
    for seed in SEEDS:
        cfg = parse_config(None, seeded(seed, "data.source=synthetic", "data.synthetic.users=400",
                                        "data.synthetic.items=200", "data.synthetic.communities=4",
                                        "data.synthetic.exposure_rate=0.5", "data.synthetic.click_rate=0.3"))
        rows = rows_by_strategy(compare_strategies(cfg, ["rns", "icpns"]))
        margins.append(rows["icpns"]["diagnostics"]["exposure_realness"]
                       - rows["rns"]["diagnostics"]["exposure_realness"])
    ok = float(np.mean(margins)) >= 0.1
    with capsys.disabled():
        acceptance(10, "exposure realness ICPNS minus RNS", ok,
                   f"mean margin {np.mean(margins):.3f} (>= 0.1), per seed {np.round(margins, 3).tolist()}")
    assert ok


# 11 -----------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_c11_hns_slowest(lightgcn_runs, capsys, acceptance):
    mean = {s: float(np.mean([r.timing["stage2_epoch_seconds"][s] for r in lightgcn_runs.values()]))
            for s in STRATEGIES}
    ok = all(mean["hns"] > mean[s] for s in STRATEGIES if s != "hns")
    with capsys.disabled():
        acceptance(11, "HNS has the highest mean epoch wall time", ok,
                   ", ".join(f"{s} {mean[s]:.3f}s" for s in STRATEGIES))
    assert ok


# 12 -----------------------------------------------------------------------------------------------

def test_c12_byte_identical_reports(tmp_path, capsys, acceptance):
    digests, canon = [], []
    for run in ("a", "b"):
        cfg = parse_config(None, seeded(3, "data.source=synthetic", "train.stage1_epochs=20",
                                        f"output.dir={tmp_path / run}"))
        report = compare_strategies(cfg, list(STRATEGIES), tmp_path / run)
        canon.append(report.canonical().encode())
        stored = json.loads(Path(tmp_path / run / "report.json").read_text())
        stored.pop("timing")
        stored["config"].pop("output")
        digests.append(json.dumps(stored, sort_keys=True, separators=(",", ":")).encode())
    ok = canon[0] == canon[1] and digests[0] == digests[1]
    with capsys.disabled():
        acceptance(12, "identical seeded runs give byte-identical canonical reports", ok,
                   f"canonical equal {canon[0] == canon[1]} ({len(canon[0])} bytes), "
                   f"report.json canonical equal {digests[0] == digests[1]}")
    assert ok
