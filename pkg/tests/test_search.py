import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpforge.causal import partial_correlation
from cpforge.cp_engine import FeatureSplit, Permutation, apply_cp, is_block_class, \
    mean_operator_invariant
from cpforge.data import Dataset
from cpforge.fairness import TRUE, contingency, odds_ratio
from cpforge.kernels_hsic import hsic
from cpforge.learn import phi_risk, train
from cpforge.search import (HsicObjective, OddsObjective, PartialCorrObjective, PhiRiskObjective,
                            SearchConfig, SearchError, SearchState, candidate_pairs,
                            crossover_learn, evaluate_candidate, exhaustive_pairs, read_trace,
                            sampled_pairs, trace_to_csv, write_trace)
from cpforge.synthetic import cm_model, dependent_pair, random_dataset, two_spirals

QUIET = dict(pvalue_every=0, track_rcp=False)


def test_candidate_counts():
    ds = Dataset(np.arange(10.0).reshape(5, 2), [1, 1, 1, -1, -1], ("a", "b"))
    assert list(candidate_pairs(ds, SearchConfig(block_class=True))) == \
        [(0, 1), (0, 2), (1, 2), (3, 4)]
    ds4 = Dataset(np.arange(8.0).reshape(4, 2), [1, 1, -1, -1], ("a", "b"))
    assert len(list(candidate_pairs(ds4, SearchConfig(block_class=False)))) == 6


def test_sampled_pairs_deterministic(rng):
    labels = np.r_[np.ones(30, int), -np.ones(20, int)]
    a = sampled_pairs(labels, True, 10, np.random.default_rng(4))
    b = sampled_pairs(labels, True, 10, np.random.default_rng(4))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert len(set(zip(*a))) == 10
    assert np.all(labels[a[0]] == labels[a[1]]) and np.all(a[0] < a[1])


def _swapped(ds, split, l, l2):
    p = np.arange(ds.m)
    p[[l, l2]] = p[[l2, l]]
    return apply_cp(ds, split, Permutation(p))


def test_hsic_candidate_deltas(rng):
    ds = random_dataset(12, 2, rng)
    split = FeatureSplit((0,), (1,))
    obj = HsicObjective.from_split(ds, split)
    state = SearchState(ds, split)
    obj.bind(state)
    for l, l2 in [(0, 5), (3, 4), (7, 11)]:
        ref = hsic(obj.Ku, obj.Kv0)
        p = np.arange(12)
        p[[l, l2]] = p[[l2, l]]
        full = hsic(obj.Ku, obj.Kv0[np.ix_(p, p)]) - ref
        assert evaluate_candidate(obj, state, (l, l2)) == pytest.approx(full, rel=1e-9, abs=1e-12)


def test_equal_rows_give_zero_delta():
    X = np.array([[0.0, 1.0], [1.0, 1.0], [2.0, 3.0], [0.5, -1.0]])
    ds = Dataset(X, [1, 1, -1, -1], ("a", "b"))
    split = FeatureSplit((0,), (1,))
    state = SearchState(ds, split)
    obj = HsicObjective.from_split(ds, split)
    obj.bind(state)
    assert evaluate_candidate(obj, state, (0, 1)) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_incremental_kernel_state(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(int(rng.integers(4, 15)), 2, rng)
    split = FeatureSplit((0,), (1,))
    obj = HsicObjective.from_split(ds, split)
    state = SearchState(ds, split)
    obj.bind(state)
    for _ in range(6):
        l, l2 = (int(v) for v in rng.choice(ds.m, size=2, replace=False))
        obj.before_swap(state, l, l2)
        state.swap(l, l2)
    p = state.perm
    np.testing.assert_allclose(obj.B, obj.Kv0[np.ix_(p, p)], atol=0)
    np.testing.assert_allclose(obj.AB, obj.Ku @ obj.B, atol=1e-10)


def test_phi_risk_deltas(rng):
    ds = random_dataset(15, 3, rng)
    split = FeatureSplit((0,), (1, 2))
    for kind in ("logistic", "square"):
        mdl = train(ds, kind, 0.1)
        obj = PhiRiskObjective(mdl)
        state = SearchState(ds, split)
        obj.bind(state)
        for l, l2 in [(0, 1), (2, 9), (13, 14)]:
            ref = phi_risk(mdl, _swapped(ds, split, l, l2)) - phi_risk(mdl, ds)
            assert evaluate_candidate(obj, state, (l, l2)) == pytest.approx(ref, abs=1e-10)


def test_odds_deltas():
    rng = np.random.default_rng(5)
    X = np.c_[rng.integers(0, 2, 20), rng.integers(0, 2, 20), rng.normal(size=20)].astype(float)
    ds = Dataset.from_arrays(X, np.where(np.arange(20) < 10, 1, -1), ("c", "a", "z"))
    split = FeatureSplit((0, 2), (1,))
    obj = OddsObjective(0, 1, TRUE, 1)
    state = SearchState(ds, split)
    obj.bind(state)
    base = abs(odds_ratio(contingency(ds, 0, 1)) - 1)
    for l, l2 in [(0, 11), (3, 4), (15, 19)]:
        t = contingency(_swapped(ds, split, l, l2), 0, 1)
        ref = float(abs(odds_ratio(t) - 1) - base)
        assert evaluate_candidate(obj, state, (l, l2)) == pytest.approx(ref, abs=1e-12)
    with pytest.raises(SearchError):
        OddsObjective(1, 0, TRUE, 1).bind(state)


def test_partial_corr_deltas():
    ds = cm_model(60, seed=2)
    split = FeatureSplit((0, 1), (2,))
    obj = PartialCorrObjective(0, 2, 1)
    state = SearchState(ds, split)
    obj.bind(state)
    base = partial_correlation(ds, 0, 2, 1)
    for l, l2 in [(0, 1), (5, 30), (40, 59)]:
        ref = partial_correlation(_swapped(ds, split, l, l2), 0, 2, 1) - base
        assert evaluate_candidate(obj, state, (l, l2)) == pytest.approx(ref, abs=1e-12)


def test_zero_iterations():
    ds = dependent_pair(40, seed=0)
    res = crossover_learn(ds, FeatureSplit((0,), (1,)), SearchConfig(iterations=0, **QUIET),
                          HsicObjective.from_split(ds, FeatureSplit((0,), (1,))))
    assert res.permutation == Permutation.identity(40)
    assert len(res.trace) == 1 and res.trace[0].pair_l is None


@pytest.mark.parametrize("mode", ["exhaustive", "sampled"])
def test_hsic_run_invariants(mode):
    ds = dependent_pair(120, seed=7)
    split = FeatureSplit((0,), (1,))
    cfg = SearchConfig(iterations=30, candidate_mode=mode, candidates=500, seed=1, **QUIET)
    obj = HsicObjective.from_split(ds, split)
    res = crossover_learn(ds, split, cfg, obj)
    vals = [r.objective for r in res.trace]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(vals[0] + res.accepted_delta_sum, rel=1e-7)
    assert vals[-1] == pytest.approx(hsic(obj.Ku, obj.Kv0[np.ix_(res.permutation.perm,
                                                                  res.permutation.perm)]))
    # replay the trace: every prefix keeps the mean operator
    p = np.arange(ds.m)
    for r in res.trace[1:]:
        p[[r.pair_l, r.pair_l2]] = p[[r.pair_l2, r.pair_l]]
        assert mean_operator_invariant(ds, split, Permutation(p))[0]
    assert np.array_equal(p, res.permutation.perm)
    assert is_block_class(res.permutation, ds.labels)


def test_unrestricted_run_may_cross_classes():
    ds = dependent_pair(60, seed=3)
    split = FeatureSplit((0,), (1,))
    res = crossover_learn(ds, split, SearchConfig(iterations=20, block_class=False, **QUIET),
                          HsicObjective.from_split(ds, split))
    assert res.trace[-1].objective < res.trace[0].objective


def test_phi_run_with_retraining_is_monotone():
    ds = two_spirals(80, seed=1)
    split = FeatureSplit((0,), (1, 2))
    mdl = train(ds, "square", 1e-3)
    cfg = SearchConfig(iterations=15, retrain_every=1, **QUIET)
    res = crossover_learn(ds, split, cfg, PhiRiskObjective(mdl), model=mdl, holdout=ds)
    vals = [r.objective for r in res.trace]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
    assert all(r.test_error is not None and r.phi_risk is not None for r in res.trace)
    assert res.model is not mdl


def test_traces_are_reproducible(tmp_path):
    ds = dependent_pair(80, seed=2)
    split = FeatureSplit((0,), (1,))
    out = []
    for k in range(2):
        cfg = SearchConfig(iterations=12, candidate_mode="sampled", candidates=300, seed=9,
                           pvalue_every=4, pvalue_resamples=49)
        res = crossover_learn(ds, split, cfg, HsicObjective.from_split(ds, split))
        write_trace(tmp_path / f"t{k}.csv", res.trace)
        out.append((tmp_path / f"t{k}.csv").read_bytes())
    assert out[0] == out[1]


def test_trace_round_trip_and_errors(tmp_path):
    ds = dependent_pair(50, seed=4)
    split = FeatureSplit((0,), (1,))
    res = crossover_learn(ds, split, SearchConfig(iterations=5, pvalue_every=2,
                                                  pvalue_resamples=19),
                          HsicObjective.from_split(ds, split))
    p = tmp_path / "t.csv"
    write_trace(p, res.trace)
    assert trace_to_csv(read_trace(p)) == p.read_text()
    bad = tmp_path / "bad.csv"
    bad.write_text(p.read_text().replace("\n1,", "\n7,", 1))
    with pytest.raises(SearchError):
        read_trace(bad)
    bad.write_text("iteration,objective\n0,1.0\n")
    with pytest.raises(SearchError):
        read_trace(bad)


def test_exhaustive_pairs_are_sorted(rng):
    labels = np.r_[np.ones(4, int), -np.ones(3, int)]
    ls, l2s = exhaustive_pairs(labels, True)
    pairs = list(zip(ls.tolist(), l2s.tolist()))
    assert pairs == sorted(pairs) and len(pairs) == 6 + 3
