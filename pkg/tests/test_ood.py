import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oodkit.diffusion import ReconstructionPlan, count_evaluations, fast_schedule, linear_schedule, make_grid
from oodkit.errors import PlanMismatchError
from oodkit.nn import DenoiserNet
from oodkit.ood import (
    ScoreMatrix,
    ValidationStats,
    column_labels,
    fit_validation_stats,
    ms_mse,
    mse,
    read_score_matrix_csv,
    read_scores_csv,
    reconstruct_all,
    score_dataset,
    score_matrix,
    scores_from_matrix,
    subsample_plan,
    write_score_matrix_csv,
    write_scores_csv,
    zscore_aggregate,
    zscores,
)
from oodkit.rng import RngHandle

FULL_PLAN = ReconstructionPlan.full(1000, 100)


def _pool_oracle(a, s):
    h, w = len(a), len(a[0])
    return [[sum(a[i * s + di][j * s + dj] for di in range(s) for dj in range(s)) / (s * s)
             for j in range(w // s)] for i in range(h // s)]


def _ms_mse_oracle(a, b, scales=(1, 2, 4)):
    tot = 0.0
    for s in scales:
        pa, pb = _pool_oracle(a, s), _pool_oracle(b, s)
        cells = [(x - y) ** 2 for ra, rb in zip(pa, pb) for x, y in zip(ra, rb)]
        tot += sum(cells) / len(cells)
    return tot / len(scales)


def test_mse_examples():
    a = np.arange(16.0).reshape(4, 4)
    assert mse(a, a) == 0.0
    assert mse(np.zeros((4, 4)), np.ones((4, 4))) == 1.0
    assert mse([0.0, 2.0], [1.0, 0.0]) == 2.5
    with pytest.raises(ValueError):
        mse(np.zeros(3), np.zeros(4))


def test_ms_mse_examples(rng):
    a = rng.standard_normal((4, 4))
    assert ms_mse(a, a) == 0.0
    assert ms_mse(np.full((8, 8), 0.3), np.full((8, 8), -0.2)) == pytest.approx(0.25, rel=1e-12)
    b = rng.standard_normal((4, 4))
    assert ms_mse(a, b) == pytest.approx(_ms_mse_oracle(a.tolist(), b.tolist()), rel=1e-12)
    with pytest.raises(ValueError):
        ms_mse(np.zeros((6, 6)), np.ones((6, 6)))
    with pytest.raises(ValueError):
        ms_mse(np.zeros((4, 4)), np.ones((8, 8)))


@settings(max_examples=40)
@given(arrays(np.float64, (8, 8), elements=st.floats(-2, 2)), arrays(np.float64, (8, 8), elements=st.floats(-2, 2)))
def test_metric_axioms(a, b):
    for f in (mse, ms_mse):
        assert f(a, b) >= 0
        assert f(a, b) == pytest.approx(f(b, a), rel=1e-12, abs=1e-15)
        assert f(a, a) == 0
    assert ms_mse(a, b) == pytest.approx(_ms_mse_oracle(a.tolist(), b.tolist()), rel=1e-9, abs=1e-15)


def test_reconstruct_all_counts():
    net = DenoiserNet((4, 4), (8,), 4, 4, seed=0)
    sched = linear_schedule(1000, 0.0015, 0.0195)
    x0 = np.zeros((4, 4), np.float32)
    recs = reconstruct_all(net, x0, FULL_PLAN, sched, RngHandle(0))
    assert len(recs) == 100
    assert sum(len(r.similarity) for r in recs) == 200
    assert [r.start_t for r in recs] == FULL_PLAN.grid
    assert net.n_evals == 5050
    one = subsample_plan(FULL_PLAN, 1)
    assert len(reconstruct_all(net, x0, one, sched, RngHandle(0))) == 1


def test_fit_validation_stats_examples():
    def stats(col):
        return fit_validation_stats(ScoreMatrix(np.array(col, float)[:, None], [(1, "mse")]))

    s = stats([0, 2])
    assert (s.mean[0], s.std[0]) == (1.0, 1.0)
    assert stats([5, 5, 5]).std[0] == 1e-12
    s = stats([1, 2, 3])
    assert s.mean[0] == 2.0 and s.std[0] == pytest.approx(math.sqrt(2 / 3), rel=1e-15)
    with pytest.raises(ValueError):
        stats([1.0])


def test_zscore_aggregate_examples():
    s = fit_validation_stats(ScoreMatrix(np.array([[1.0, 4.0], [3.0, 8.0]]), [(1, "mse"), (1, "ms_mse")]))
    assert zscore_aggregate(s.mean, s) == 0.0
    ones = ValidationStats(np.ones(4), np.ones(4), tuple((t, "mse") for t in range(4)))
    assert zscore_aggregate(np.full(4, 3.0), ones) == 2.0
    single = fit_validation_stats(ScoreMatrix(np.array([[1.0], [2.0], [3.0]]), [(1, "mse")]))
    assert zscore_aggregate([4.0], single) == pytest.approx(2.0 / math.sqrt(2 / 3), rel=1e-12)
    assert zscore_aggregate([4.0], single) == pytest.approx(2.449, abs=1e-3)
    with pytest.raises(ValueError):
        zscore_aggregate([1.0, 2.0], single)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_aggregation_linearity(seed, c):
    r = np.random.default_rng(seed)
    vals = r.standard_normal((6, 4)) + 3
    labels = [(1, "mse"), (1, "ms_mse"), (2, "mse"), (2, "ms_mse")]
    stats = fit_validation_stats(ScoreMatrix(vals, labels))
    rows = r.standard_normal((5, 4))
    base = zscores(rows, stats).mean(axis=1)
    j = int(r.integers(4))
    rows2 = rows.copy()
    rows2[:, j] *= c
    mean2, std2 = stats.mean.copy(), stats.std.copy()
    mean2[j] *= c
    std2[j] *= c
    np.testing.assert_allclose(zscores(rows2, ValidationStats(mean2, std2, stats.labels)).mean(axis=1), base,
                               rtol=1e-9, atol=1e-9)


def test_subsample_examples():
    p25 = subsample_plan(FULL_PLAN, 25)
    assert p25.grid == FULL_PLAN.grid[::4]
    assert count_evaluations(p25).model_evaluations == 1225
    p13 = subsample_plan(FULL_PLAN, 13)
    assert p13.grid == FULL_PLAN.grid[::8]
    assert count_evaluations(p13).model_evaluations == 637
    assert subsample_plan(FULL_PLAN, 100).grid == FULL_PLAN.grid
    capped = subsample_plan(FULL_PLAN, 50, max_T=500)
    assert capped.grid == list(range(10, 501, 10)) and capped.max_T == 500
    # the stepping schedule is untouched by subsampling
    assert p13.steps_grid == FULL_PLAN.steps_grid
    with pytest.raises(ValueError):
        subsample_plan(FULL_PLAN, 60, max_T=500)
    with pytest.raises(ValueError):
        subsample_plan(FULL_PLAN, 0)


@given(st.integers(1, 100), st.integers(10, 1000))
def test_subsample_nesting(keep, max_T):
    avail = max_T // 10
    if keep > avail:
        with pytest.raises(ValueError):
            subsample_plan(FULL_PLAN, keep, max_T)
        return
    p = subsample_plan(FULL_PLAN, keep, max_T)
    assert set(p.grid) <= set(FULL_PLAN.grid)
    assert p.n_recon == keep and all(g <= max_T for g in p.grid)


def test_budget_decreases_with_keep():
    budgets = [count_evaluations(subsample_plan(FULL_PLAN, k)).model_evaluations for k in (100, 50, 25, 13, 5, 1)]
    assert all(a > b for a, b in zip(budgets, budgets[1:]))


@pytest.fixture(scope="module")
def scoring_setup():
    sched = fast_schedule()
    plan = ReconstructionPlan.full(100, 10)
    net = DenoiserNet((8, 8), (16,), 4, 8, seed=1, zero_output=False)
    imgs = np.random.default_rng(3).uniform(-1, 1, (12, 8, 8)).astype(np.float32)
    return sched, plan, net, imgs


def test_score_matrix_self_normalisation(scoring_setup):
    sched, plan, net, imgs = scoring_setup
    m = score_matrix(net, imgs, plan, sched, RngHandle(0))
    assert m.values.shape == (12, 2 * plan.n_recon)
    assert m.labels == column_labels(plan)
    z = zscores(m.values, fit_validation_stats(m))
    assert np.abs(z.mean(axis=0)).max() <= 1e-9
    assert np.abs(z.std(axis=0) - 1).max() <= 1e-6


def test_score_dataset_deterministic_and_budget(scoring_setup):
    sched, plan, net, imgs = scoring_setup
    stats = fit_validation_stats(score_matrix(net, imgs, plan, sched, RngHandle(0)))
    net.n_evals = 0
    a = score_dataset(net, imgs[:5], plan, stats, sched, RngHandle(1))
    assert net.n_evals == 5 * count_evaluations(plan).model_evaluations
    b = score_dataset(net, imgs[:5], plan, stats, sched, RngHandle(1))
    np.testing.assert_array_equal(a, b)


def test_rows_independent_of_chunking(scoring_setup):
    sched, plan, net, imgs = scoring_setup
    full = score_matrix(net, imgs, plan, sched, RngHandle(0), input_ids=range(12))
    chunked = score_matrix(net, imgs, plan, sched, RngHandle(0), input_ids=range(12), chunk=5)
    np.testing.assert_allclose(chunked.values, full.values, rtol=1e-6)
    alone = score_matrix(net, imgs[7:8], plan, sched, RngHandle(0), input_ids=[7])
    np.testing.assert_allclose(alone.values[0], full.values[7], rtol=1e-6)


def test_plan_stats_mismatch(scoring_setup):
    sched, plan, net, imgs = scoring_setup
    stats = fit_validation_stats(score_matrix(net, imgs, plan, sched, RngHandle(0)))
    other = subsample_plan(plan, 5)
    with pytest.raises(PlanMismatchError):
        score_dataset(net, imgs, other, stats, sched, RngHandle(0))
    with pytest.raises(PlanMismatchError):
        scores_from_matrix(score_matrix(net, imgs[:2], other, sched, RngHandle(0)), stats)


def test_score_matrix_invariants():
    with pytest.raises(ValueError):
        ScoreMatrix(np.zeros((2, 3)), [(1, "mse"), (1, "ms_mse")])
    with pytest.raises(ValueError):
        ScoreMatrix(np.array([[np.nan, 1.0]]), [(1, "mse"), (1, "ms_mse")])
    m = ScoreMatrix(np.arange(8.0).reshape(2, 4), [(1, "mse"), (1, "ms_mse"), (2, "mse"), (2, "ms_mse")])
    assert m.n_recon == 2
    np.testing.assert_array_equal(m.select([(2, "mse")]).values[:, 0], [2.0, 6.0])
    with pytest.raises(PlanMismatchError):
        m.select([(3, "mse")])


def test_stats_dict_round_trip():
    s = ValidationStats(np.array([1.5, 2.0]), np.array([0.1, 1e-12]), ((10, "mse"), (10, "ms_mse")))
    back = ValidationStats.from_dict(s.to_dict())
    np.testing.assert_array_equal(back.mean, s.mean)
    np.testing.assert_array_equal(back.std, s.std)
    assert back.labels == s.labels


def test_csv_round_trips(tmp_path, rng):
    m = ScoreMatrix(rng.standard_normal((3, 4)), [(5, "mse"), (5, "ms_mse"), (10, "mse"), (10, "ms_mse")], [4, 9, 2])
    p = tmp_path / "m.csv"
    write_score_matrix_csv(p, m)
    assert p.read_text().splitlines()[0] == "input_id,start_t,metric,value"
    back = read_score_matrix_csv(p)
    np.testing.assert_array_equal(back.values, m.values)
    assert back.labels == m.labels and back.input_ids == m.input_ids
    s = tmp_path / "s.csv"
    write_scores_csv(s, [4, 9, 2], [0.1, -2.5, 1e-300])
    assert s.read_text().splitlines()[0] == "input_id,score"
    ids, vals = read_scores_csv(s)
    assert ids == [4, 9, 2] and vals.tolist() == [0.1, -2.5, 1e-300]
