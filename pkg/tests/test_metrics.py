"""Evaluation metrics: worked examples pinned exactly, properties by loop."""

import csv
import math

import numpy as np
import pytest
import scipy.special
import scipy.stats

from vfgl_lab import metrics, models


# --- attack success rate ----------------------------------------------------


def test_asr_basic():
    assert metrics.asr(3, 4) == 75.0
    assert metrics.asr(0, 10) == 0.0
    assert metrics.asr(10, 10) == 100.0


def test_asr_validation():
    with pytest.raises(ValueError):
        metrics.asr(5, 0)
    with pytest.raises(ValueError):
        metrics.asr(-1, 5)
    with pytest.raises(ValueError):
        metrics.asr(6, 5)


# --- contribution scores ------------------------------------------------------


def test_contribution_scores_worked_example():
    # accuracies 0.9 / 0.6 normalize to 0.6 / 0.4 of the total, and the
    # sinh(5*_) sharpening gives sinh(3) : sinh(2)
    cs = metrics.contribution_scores([0.9, 0.6], alpha=5.0)
    want0 = math.sinh(3.0) / (math.sinh(3.0) + math.sinh(2.0))
    assert abs(cs[0] - want0) < 1e-12
    assert abs(cs[0] - 0.7342) < 1e-4
    assert abs(cs.sum() - 1.0) < 1e-12


def test_contribution_scores_equal_split():
    cs = metrics.contribution_scores([0.8, 0.8])
    assert np.allclose(cs, [0.5, 0.5], atol=1e-12)


def test_contribution_scores_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(50):
        k = int(rng.integers(2, 9))
        accs = rng.random(k) + 1e-3
        cs = metrics.contribution_scores(accs, alpha=float(rng.uniform(1, 9)))
        assert abs(cs.sum() - 1.0) < 1e-9
        assert (cs > 0).all()


def test_contribution_scores_order_follows_accuracy():
    rng = np.random.default_rng(1)
    for _ in range(30):
        accs = rng.permutation([0.2, 0.5, 0.65, 0.9])
        cs = metrics.contribution_scores(accs)
        assert (np.argsort(cs) == np.argsort(accs)).all()


def test_contribution_scores_permutation_equivariant():
    accs = np.array([0.3, 0.9, 0.55])
    base = metrics.contribution_scores(accs)
    perm = np.array([2, 0, 1])
    assert np.allclose(metrics.contribution_scores(accs[perm]), base[perm])


def test_contribution_scores_validation():
    with pytest.raises(ValueError):
        metrics.contribution_scores([])
    with pytest.raises(ValueError):
        metrics.contribution_scores([0.5, -0.1])
    with pytest.raises(ValueError):
        metrics.contribution_scores([0.0, 0.0])


# --- average queries -----------------------------------------------------------


def test_aq_worked_example():
    # one success after a single query, one failure (charged the full
    # budget), one success after three: (1 + 200 + 3) / 3
    assert metrics.aq([1, None, 3], Q=200) == 68.0


def test_aq_extremes():
    assert metrics.aq([1, 1, 1, 1], Q=200) == 1.0
    assert metrics.aq([None, None], Q=200) == 200.0


def test_aq_monotone_in_budget_when_failures_present():
    counts = [4, None, 7, None]
    vals = [metrics.aq(counts, Q=q) for q in (10, 50, 100, 400)]
    assert vals == sorted(vals)
    assert vals[0] < vals[-1]


def test_aq_validation():
    with pytest.raises(ValueError):
        metrics.aq([], Q=10)
    with pytest.raises(ValueError):
        metrics.aq([1], Q=0)
    with pytest.raises(ValueError):
        metrics.aq([11], Q=10)
    with pytest.raises(ValueError):
        metrics.aq([-1], Q=10)


# --- relative improvement -------------------------------------------------------


def test_impv_worked_example():
    assert round(metrics.impv(17.15, 52.37), 2) == 205.36


def test_impv_edge_values():
    assert metrics.impv(40.0, 40.0) == 0.0
    assert metrics.impv(20.0, 10.0) == -50.0


def test_impv_rejects_zero_baseline():
    with pytest.raises(ValueError):
        metrics.impv(0.0, 10.0)


# --- special functions ------------------------------------------------------------


def test_regularized_incomplete_beta_against_scipy():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a = float(rng.uniform(0.5, 20.0))
        b = float(rng.uniform(0.5, 20.0))
        x = float(rng.uniform(0.0, 1.0))
        want = scipy.special.betainc(a, b, x)
        assert abs(metrics.regularized_incomplete_beta(a, b, x) - want) < 1e-8


def test_regularized_incomplete_beta_endpoints():
    assert metrics.regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
    assert metrics.regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0


def test_student_t_sf_against_scipy():
    for df in (1, 2, 3, 5, 10, 30):
        for t in (0.0, 0.5, 1.0, 2.1, 4.7, -3.3):
            want = 2.0 * scipy.stats.t.sf(abs(t), df)
            assert abs(metrics.student_t_sf(t, df) - want) < 1e-8


def test_student_t_sf_validation():
    with pytest.raises(ValueError):
        metrics.student_t_sf(1.0, 0)


# --- correlation -------------------------------------------------------------------


def test_pearson_worked_example():
    r, p = metrics.pearson_significance([1, 2, 3, 4, 5], [2, 1, 4, 3, 5])
    assert abs(r - 0.8) < 1e-12
    assert abs(p - 0.104) < 5e-4
    sr, sp = scipy.stats.pearsonr([1, 2, 3, 4, 5], [2, 1, 4, 3, 5])
    assert abs(r - sr) < 1e-12
    assert abs(p - sp) < 1e-8


def test_pearson_perfect_correlation_has_zero_p():
    # deviations (-1,-1,0,1,1) have an exactly representable norm, so the
    # coefficient lands on +-1.0 without rounding residue
    xs = [0.0, 0.0, 1.0, 2.0, 2.0]
    r, p = metrics.pearson_significance(xs, xs)
    assert r == 1.0 and p == 0.0
    r, p = metrics.pearson_significance(xs, [2.0, 2.0, 1.0, 0.0, 0.0])
    assert r == -1.0 and p == 0.0
    # near-perfect series still drive p toward zero
    _, p = metrics.pearson_significance([1, 2, 3], [10, 20, 30])
    assert p < 1e-6


def test_pearson_matches_scipy_on_random_series():
    rng = np.random.default_rng(3)
    for _ in range(40):
        n = int(rng.integers(3, 30))
        xs = rng.normal(size=n)
        ys = rng.normal(size=n)
        r, p = metrics.pearson_significance(xs, ys)
        sr, sp = scipy.stats.pearsonr(xs, ys)
        assert abs(r - sr) < 1e-10
        assert abs(p - sp) < 1e-8


def test_pearson_symmetry_and_scaling():
    xs = [1.0, 4.0, 2.0, 8.0]
    ys = [0.5, 2.0, 1.5, 3.0]
    r1, p1 = metrics.pearson_significance(xs, ys)
    r2, p2 = metrics.pearson_significance(ys, xs)
    assert (r1, p1) == (r2, p2)
    r3, _ = metrics.pearson_significance([-2 * x + 7 for x in xs], ys)
    assert abs(r3 + r1) < 1e-12


def test_pearson_validation():
    with pytest.raises(ValueError):
        metrics.pearson_significance([1, 2], [3, 4])
    with pytest.raises(ValueError):
        metrics.pearson_significance([1, 1, 1], [2, 3, 4])
    with pytest.raises(ValueError):
        metrics.pearson_significance([1, 2, 3], [[1], [2], [3]])


# --- server weight forensics ----------------------------------------------------


def head_with_first_layer(W0):
    rng = np.random.default_rng(0)
    hidden = W0.shape[1]
    return models.MLPParams(
        (W0, rng.normal(size=(hidden, 3))),
        (np.zeros(hidden), np.zeros(3)))


def test_weight_norm_diff_identical_blocks_is_zero():
    block = np.random.default_rng(5).normal(size=(4, 6))
    W0 = np.vstack([block, block])
    assert metrics.weight_norm_diff(head_with_first_layer(W0), 0,
                                    num_clients=2, embed_dim=4) == 0.0


def test_weight_norm_diff_doubled_malicious_block():
    block = np.random.default_rng(6).normal(size=(4, 6))
    W0 = np.vstack([2 * block, block])
    got = metrics.weight_norm_diff(head_with_first_layer(W0), 0,
                                   num_clients=2, embed_dim=4)
    assert abs(got - float(np.linalg.norm(block))) < 1e-12


def test_weight_norm_diff_benign_mean_over_many_clients():
    rng = np.random.default_rng(7)
    blocks = [rng.normal(size=(3, 5)) for _ in range(4)]
    W0 = np.vstack(blocks)
    got = metrics.weight_norm_diff(head_with_first_layer(W0), 2,
                                   num_clients=4, embed_dim=3)
    norms = [float(np.linalg.norm(b)) for b in blocks]
    want = norms[2] - (norms[0] + norms[1] + norms[3]) / 3.0
    assert abs(got - want) < 1e-12


def test_weight_norm_diff_validation():
    W0 = np.zeros((8, 6))
    with pytest.raises(ValueError):
        metrics.weight_norm_diff(head_with_first_layer(W0), 0,
                                 num_clients=3, embed_dim=4)
    with pytest.raises(ValueError):
        metrics.weight_norm_diff(head_with_first_layer(W0), 2,
                                 num_clients=2, embed_dim=4)


# --- detection rate ------------------------------------------------------------


def test_detection_rate():
    assert metrics.detection_rate([True, False, False, True]) == 50.0
    assert metrics.detection_rate([False] * 20 + [True]) == pytest.approx(
        100.0 / 21)
    with pytest.raises(ValueError):
        metrics.detection_rate([])


# --- embedding export ------------------------------------------------------------


def test_export_embeddings_layout(small_pipeline, small_graph, tmp_path):
    nodes = [0, 5, 17]
    out = tmp_path / "emb.csv"
    metrics.export_embeddings(small_pipeline.clients, small_pipeline.server,
                              small_pipeline.shadow, small_graph, nodes, out)
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    width = len(small_pipeline.clients) * models.EMBED_DIM
    assert rows[0] == ["node", "source"] + [f"e_{i}" for i in range(width)]
    assert len(rows) == 1 + 2 * len(nodes)
    servers = [r for r in rows[1:] if r[1] == "server"]
    shadows = [r for r in rows[1:] if r[1] == "shadow"]
    assert [int(r[0]) for r in servers] == nodes
    assert [int(r[0]) for r in shadows] == nodes
    # shadow rows are zero-padded past the single-client embedding width
    pad = np.array([float(x) for x in shadows[0][2 + models.EMBED_DIM:]])
    assert (pad == 0.0).all()


def test_export_embeddings_deterministic(small_pipeline, small_graph,
                                         tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        metrics.export_embeddings(small_pipeline.clients,
                                  small_pipeline.server,
                                  small_pipeline.shadow, small_graph,
                                  [1, 2], path)
    assert a.read_text() == b.read_text()


# --- results table ----------------------------------------------------------------


def make_record(**overrides):
    base = dict(run_id="na2-fga-none-K2-s0", seed=0, method="na2",
                attack="fga", defense="none", K=2, gamma=0.05, tau=15,
                delta=1, clean_acc=0.84, asr=23.7, impv=88.1, aq=1.0,
                cs_malicious=0.61, shadow_mse=0.002, weight_norm_diff=0.4,
                dr_flag=False)
    base.update(overrides)
    return metrics.ExperimentRecord(**base)


def test_record_row_blanks_out_missing_fields():
    row = make_record(impv=None, dr_flag=None).to_row()
    header = dict(zip(metrics.RESULTS_COLUMNS, row))
    assert header["impv"] == ""
    assert header["dr_flag"] == ""
    assert header["asr"] == "23.700000"


def test_results_csv_round_trip(tmp_path):
    records = [make_record(seed=s, run_id=f"na2-fga-none-K2-s{s}")
               for s in range(3)]
    path = tmp_path / "results.csv"
    metrics.write_results_csv(records, path)
    rows = metrics.read_results_csv(path)
    assert len(rows) == 3
    assert list(rows[0].keys()) == metrics.RESULTS_COLUMNS
    assert rows[1]["seed"] == "1"
    assert rows[2]["run_id"] == "na2-fga-none-K2-s2"
    assert float(rows[0]["cs_malicious"]) == pytest.approx(0.61)
