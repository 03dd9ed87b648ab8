import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import norm

from jsmix.errors import InputError
from jsmix.inference import (
    calendar_blocks,
    experiment_metrics,
    interval,
    map_classify,
    mauc,
    membership_matrix,
    overlap_index,
    rhat,
    summarize_fit,
    uncaught_composition,
    waic,
    yearly_sizes,
)
from jsmix.model import CaptureData, ModelSpec, grid_from_day_lags
from jsmix.sampler import McmcConfig, Model, run_fit
from oracles import pair_count_auc, textbook_rhat

finite = st.floats(-50, 0, allow_nan=False)


# -- WAIC ------------------------------------------------------------------------

def test_waic_identical_draws():
    ll = np.tile([-1.0, -2.5, -0.3], (5, 1))
    w, lppd, p = waic(ll)
    assert p == 0.0
    assert w == pytest.approx(-2 * ll[0].sum())


def test_waic_two_draws_by_hand():
    ll = np.log([[0.5], [0.25]])
    w, lppd, p = waic(ll)
    assert lppd == pytest.approx(math.log(0.375))
    assert p == pytest.approx(np.var(ll[:, 0], ddof=1))
    assert w == pytest.approx(-2 * (lppd - p))


def test_waic_needs_two_draws():
    with pytest.raises(InputError):
        waic(np.zeros((1, 3)))


def test_waic_multiplicity_equals_expansion(rng):
    ll = rng.normal(-2, 0.5, (30, 4))
    mult = np.array([3, 1, 2, 5])
    expanded = np.repeat(ll, mult, axis=1)
    np.testing.assert_allclose(waic(ll, mult), waic(expanded), rtol=1e-12)


@given(arrays(float, (6, 4), elements=finite), st.randoms())
def test_waic_permutation_invariant(ll, rnd):
    order = list(range(ll.shape[0]))
    rnd.shuffle(order)
    np.testing.assert_allclose(waic(ll[order]), waic(ll), rtol=1e-10, atol=1e-10)


def test_waic_chain_order(rng):
    a, b = rng.normal(-1, 0.3, (20, 5)), rng.normal(-1.1, 0.3, (20, 5))
    np.testing.assert_allclose(waic(np.vstack([a, b])), waic(np.vstack([b, a])), rtol=1e-12)


# -- R-hat ------------------------------------------------------------------------

def test_rhat_white_noise(rng):
    x = rng.normal(size=(2, 20_000))
    assert rhat(x) == pytest.approx(1.0, abs=0.01)


def test_rhat_separated_chains(rng):
    x = np.stack([rng.normal(0, 1, 1000), rng.normal(10, 1, 1000)])
    assert rhat(x) > 1.1


def test_rhat_textbook(rng):
    for n in (10, 11, 200):
        x = rng.normal(size=(3, n)) + rng.normal(size=(3, 1))
        assert rhat(x) == pytest.approx(textbook_rhat(x), rel=1e-12)


def test_rhat_constant():
    val, flag = rhat(np.ones((2, 50)), return_flag=True)
    assert val == 1.0 and flag


# -- overlap --------------------------------------------------------------------------

def test_overlap_identical(rng):
    x = rng.normal(size=5000)
    assert overlap_index(x, x) == pytest.approx(1.0, abs=0.01)


def test_overlap_disjoint(rng):
    assert overlap_index(rng.normal(0, 1, 5000), rng.normal(100, 1, 5000)) < 1e-6


def test_overlap_shifted_normals(rng):
    want = 2 * norm.cdf(-0.5)
    assert want == pytest.approx(0.617, abs=1e-3)
    got = overlap_index(rng.normal(0, 1, 100_000), rng.normal(1, 1, 100_000))
    assert got == pytest.approx(want, abs=0.01)


def test_overlap_symmetric_and_affine(rng):
    a, b = rng.gamma(2, 1, 3000), rng.gamma(3, 1, 2000)
    assert overlap_index(a, b) == pytest.approx(overlap_index(b, a), abs=1e-12)
    assert overlap_index(3 * a + 7, 3 * b + 7) == pytest.approx(overlap_index(a, b), abs=1e-3)


def test_overlap_bandwidth_rules(rng):
    # a narrow sample beside a wide one: a pooled bandwidth smears the narrow one
    narrow, wide = rng.normal(0.97, 0.01, 20_000), rng.uniform(0.0, 0.97, 20_000)
    x = np.linspace(0.0, 0.97, 200_001)
    want = np.trapezoid(np.minimum(norm.pdf(x, 0.97, 0.01), 1 / 0.97), x)
    assert overlap_index(narrow, wide) == pytest.approx(want, abs=0.01)
    assert overlap_index(narrow, wide, bandwidth="pooled") > overlap_index(narrow, wide)
    a, b = rng.normal(0, 1, 50_000), rng.normal(1, 1, 50_000)
    assert overlap_index(a, b, bandwidth="pooled") == pytest.approx(2 * norm.cdf(-0.5), abs=0.01)
    with pytest.raises(InputError):
        overlap_index(a, b, bandwidth="scott")


def test_overlap_empty():
    with pytest.raises(InputError):
        overlap_index([], [1.0])


# -- classification ----------------------------------------------------------------------

def test_mauc_perfect():
    labels = np.array([0, 0, 1, 1, 2, 2])
    assert mauc(np.eye(3)[labels], labels) == 1.0


def test_mauc_random_baseline(rng):
    labels = rng.integers(0, 3, 6000)
    prob = rng.dirichlet(np.ones(3), 6000)
    assert mauc(prob, labels) == pytest.approx(0.5, abs=0.02)


def test_mauc_two_classes_rank_auc(rng):
    labels = rng.integers(0, 2, 300)
    p1 = np.round(np.clip(rng.normal(0.3 + 0.3 * labels, 0.2), 0, 1), 2)
    prob = np.stack([1 - p1, p1], axis=1)
    assert mauc(prob, labels) == pytest.approx(pair_count_auc(p1[labels == 1], p1[labels == 0]), rel=1e-12)


def test_mauc_hand_till_by_pairs(rng):
    labels = rng.integers(0, 3, 200)
    prob = rng.dirichlet(np.ones(3), 200) + 0.2 * np.eye(3)[labels]
    want = []
    for i in range(3):
        for j in range(i + 1, 3):
            a_ij = pair_count_auc(prob[labels == i, i], prob[labels == j, i])
            a_ji = pair_count_auc(prob[labels == j, j], prob[labels == i, j])
            want.append((a_ij + a_ji) / 2)
    assert mauc(prob, labels) == pytest.approx(np.mean(want), rel=1e-12)


def test_mauc_monotone_invariance(rng):
    labels = rng.integers(0, 3, 300)
    prob = rng.dirichlet(np.ones(3), 300) + 0.3 * np.eye(3)[labels]
    warped = np.column_stack([np.exp(prob[:, 0]), prob[:, 1] ** 3, np.arctan(prob[:, 2])])
    assert mauc(warped, labels) == pytest.approx(mauc(prob, labels), rel=1e-12)


def test_mauc_absent_class_reported():
    labels = np.array([0, 0, 1, 1])
    prob = np.array([[0.8, 0.1, 0.1], [0.6, 0.3, 0.1], [0.2, 0.7, 0.1], [0.3, 0.6, 0.1]])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        value, skipped = mauc(prob, labels, return_skipped=True)
    assert value == 1.0
    assert skipped == [(0, 2), (1, 2)]
    assert caught


def test_map_classify():
    m = np.array([[0.9, 0.05, 0.05], [1 / 3, 1 / 3, 1 / 3], [0.2, 0.3, 0.5]])
    np.testing.assert_array_equal(map_classify(m), [0, 0, 2])
    np.testing.assert_array_equal(map_classify(m * 7.5), [0, 0, 2])


def test_membership_rows_sum_to_one(rng):
    labels = rng.integers(0, 3, (400, 20))
    m = membership_matrix(labels, 3)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-10)
    assert m[5, 1] == pytest.approx((labels[:, 5] == 1).mean())


# -- summaries ----------------------------------------------------------------------------

def test_interval_order(rng):
    iv = interval(rng.normal(size=1000))
    assert iv["lower"] <= iv["median"] <= iv["upper"]


def test_yearly_sizes_hand_count():
    # 3 rows, occasions 0-1 in 2018 and 2-3 in 2019
    entry = np.array([[0, 2, -1], [1, 1, 3]])
    exit_ = np.array([[0, 3, -1], [2, 1, 3]])
    labels = np.array([[0, 1, 1], [1, 0, 1]])
    out = yearly_sizes(entry, exit_, labels, [2018, 2018, 2019, 2019], 2)
    np.testing.assert_array_equal(out[2018], [[1, 0], [1, 1]])
    np.testing.assert_array_equal(out[2019], [[0, 1], [0, 2]])


def test_yearly_sizes_empty():
    entry = np.full((2, 4), -1)
    out = yearly_sizes(entry, entry, np.zeros((2, 4), dtype=int), [1, 1, 2, 2], 3)
    assert all(not v.any() for v in out.values())


def test_calendar_must_be_contiguous():
    with pytest.raises(InputError):
        calendar_blocks([2018, 2019, 2018], 3)
    with pytest.raises(InputError):
        calendar_blocks([2018, 2019], 3)


def test_uncaught_fractions_sum_to_one(rng):
    counts = rng.integers(0, 5, (100, 3))
    frac = uncaught_composition(counts)
    np.testing.assert_allclose(frac.sum(axis=1), 1.0)


@pytest.fixture(scope="module")
def small_fit():
    grid = grid_from_day_lags([20, 30, 15, 40])
    y = np.array([[1, 0, 1, 0, 0], [0, 1, 1, 1, 0], [0, 0, 0, 1, 1], [1, 1, 0, 0, 0], [0, 0, 1, 0, 0]], dtype=np.uint8)
    model = Model(CaptureData(y, n_augmented=15), ModelSpec.rpt_model(), grid)
    return run_fit(model, McmcConfig(n_chains=2, n_iters=400, burn_in=100, seed=21))


def test_summary_single_year(small_fit):
    fs = summarize_fit(small_fit, calendar=[2019] * 5)
    S = small_fit.n_chains * small_fit.n_draws
    sizes = yearly_sizes(small_fit.entry.reshape(S, -1), small_fit.exit.reshape(S, -1), small_fit.pooled_labels(), [2019] * 5, 3)
    np.testing.assert_array_equal(sizes[2019].sum(axis=1), small_fit.pooled("N_super"))
    assert fs.yearly["2019"]["total"]["median"] == pytest.approx(fs.abundance["N_super"]["median"])


def test_summary_schema(small_fit):
    fs = summarize_fit(small_fit)
    ns = fs.abundance["N_super"]
    assert ns["lower"] <= ns["median"] <= ns["upper"]
    np.testing.assert_allclose(fs.membership.sum(axis=1), 1.0, atol=1e-10)
    assert fs.membership.shape == (5, 3)
    assert set(fs.waic) >= {"waic", "lppd", "p_waic"}
    assert sum(fs.uncaught.values()) == pytest.approx(1.0)
    for name in ("N_super", "phi[T]", "phi[NT]", "delta", "mu"):
        assert "rhat" in fs.parameters[name]


# -- experiment metrics ---------------------------------------------------------------------

def _rec(median, truth=170, lower=0, upper=500, model="rpt", replica=0, waic_value=1.0, **kw):
    return dict(scenario=10, model=model, replica=replica, truth=truth, expected=170, median=median,
                lower=lower, upper=upper, waic=waic_value, **kw)


def test_metrics_mae_rel():
    table = experiment_metrics([_rec(180, replica=0), _rec(160, replica=1)])
    row = table.get(10, "rpt")
    assert row["MAE_rel"] == pytest.approx(10 / 170)
    assert row["coverage"] == 1.0


def test_metrics_exact_estimates():
    row = experiment_metrics([_rec(170, lower=170, upper=170)]).get(10, "rpt")
    assert row["MAE"] == 0.0 and row["coverage"] == 1.0


def test_metrics_best_waic_and_means():
    recs = [
        _rec(170, model="rpt", replica=0, waic_value=10, ov=0.1, mauc=0.9),
        _rec(170, model="m1", replica=0, waic_value=12),
        _rec(170, model="rpt", replica=1, waic_value=15, ov=0.3, mauc=0.7),
        _rec(170, model="m1", replica=1, waic_value=11),
    ]
    table = experiment_metrics(recs)
    assert table.get(10, "rpt")["pct_best_WAIC"] == 50.0
    assert table.get(10, "rpt")["OV"] == pytest.approx(0.2)
    assert table.get(10, "rpt")["median_WAIC"] == pytest.approx(12.5)
    assert math.isnan(table.get(10, "m1")["OV"])
    assert table.to_csv().splitlines()[0].startswith("scenario,model")
