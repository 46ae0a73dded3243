import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpforge.causal import (CausalDag, CausalError, backdoor_adjustments, cm_bound_R, corr,
                            d_separated, greedy_partial_corr_jam, interfering_split,
                            partial_correlation, query_vsets, random_blockclass_jam,
                            split_vsets)
from cpforge.cp_engine import is_block_class
from cpforge.data import Dataset
from cpforge.synthetic import cm_model
from oracles import backdoor_sets_oracle, path_blocked, simple_paths


def dag(arcs, latent=(), queries=(), vertices=None):
    vs = vertices or sorted({v for a in arcs for v in a} | set(latent))
    return CausalDag(tuple(vs), frozenset(latent), tuple(arcs), tuple(queries))


def random_dag(rng, n_obs, n_lat):
    names = [f"v{i}" for i in range(n_obs)] + [f"u{i}" for i in range(n_lat)]
    order = list(rng.permutation(names))
    arcs = [(order[i], order[j]) for i in range(len(order)) for j in range(i + 1, len(order))
            if rng.random() < 0.35]
    return CausalDag(tuple(names), frozenset(names[n_obs:]), tuple(arcs))


def test_partial_correlation_vs_residuals(rng):
    X = rng.normal(size=(300, 3))
    X[:, 2] += 0.5 * X[:, 0] + 0.8 * X[:, 1]
    X[:, 1] += 0.3 * X[:, 0]

    def resid(a, b):
        A = np.c_[np.ones(len(b)), b]
        return a - A @ np.linalg.lstsq(A, a, rcond=None)[0]
    ref = corr(resid(X[:, 0], X[:, 1]), resid(X[:, 2], X[:, 1]))
    assert partial_correlation(X, 0, 2, 1) == pytest.approx(ref, abs=1e-12)


def test_partial_correlation_sampling_examples():
    rng = np.random.default_rng(11)
    x1, x2 = rng.normal(size=1000), rng.normal(size=1000)
    assert partial_correlation(np.c_[x1, x2, x1], 0, 2, 1) == pytest.approx(1.0, abs=0.05)
    Z = np.random.default_rng(12).normal(size=(2000, 3))
    assert abs(partial_correlation(Z, 0, 2, 1)) < 0.08


def test_partial_correlation_degenerate(rng):
    x = rng.normal(size=20)
    with pytest.raises(CausalError):
        partial_correlation(np.c_[x, 2 * x, rng.normal(size=20)], 0, 2, 1)


def _labelled(X, y):
    return Dataset.from_arrays(np.asarray(X, float), np.asarray(y), ("x1", "x2", "x3"))


def test_cm_bound_hand_computation():
    X = [[1, 0, 2], [2, 1, 1], [3, 1, 3], [0, 0, 0], [1, 2, 1], [-1, 0, 1]]
    y = [1, 1, 1, -1, -1, -1]
    ds = _labelled(X, y)
    A = np.array(X, float)
    gaps = [(A[:3, j].mean() - A[3:, j].mean()) / A[:, j].std() for j in range(3)]
    r12 = np.corrcoef(A[:, 0], A[:, 1])[0, 1]
    ref = 0.25 * (gaps[0] - r12 * gaps[1]) * gaps[2] / 0.5
    assert cm_bound_R(ds, 0.5) == pytest.approx(ref, rel=1e-12)
    scaled = ds.with_observations(ds.observations * np.array([3.0, 0.1, 7.0]))
    assert cm_bound_R(scaled, 0.5) == pytest.approx(cm_bound_R(ds, 0.5), rel=1e-12)


def test_cm_bound_zero_gap():
    X = [[1, 0, 2], [-1, 1, 1], [1, 0, 2], [-1, 1, 1]]
    assert cm_bound_R(_labelled(X, [1, 1, -1, -1])) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(CausalError):
        cm_bound_R(_labelled(X, [1, 1, -1, -1]), epsilon=0.2)


def test_greedy_jam_reaches_bound():
    ds = cm_model(500, seed=3)
    res = greedy_partial_corr_jam(ds)
    assert res.trace[0] > res.bound
    assert res.final <= res.bound + 1e-6 and res.reached_bound
    assert all(b < a for a, b in zip(res.trace, res.trace[1:]))
    assert is_block_class(res.permutation, ds.labels)
    X = np.array(ds.observations)
    X[:, 2] = X[res.permutation.perm, 2]
    assert partial_correlation(X, 0, 2, 1) == pytest.approx(res.final, abs=1e-12)
    assert corr(X[:, 0], X[:, 1]) == corr(ds.observations[:, 0], ds.observations[:, 1])


def test_greedy_jam_already_below():
    ds = cm_model(200, seed=1)
    res = greedy_partial_corr_jam(ds, bound=5.0)
    assert res.pairs == [] and len(res.trace) == 1
    assert res.permutation.perm.tolist() == list(range(200))


def test_random_jam_two_per_class():
    ds = _labelled([[0, 1, 1], [1, 0, 2], [2, 2, 3], [3, 1, 5]], [1, 1, -1, -1])
    seen = {tuple(random_blockclass_jam(ds, seed=s)[0].perm) for s in range(200)}
    assert seen == {(0, 1, 2, 3), (1, 0, 2, 3), (0, 1, 3, 2), (1, 0, 3, 2)}


def test_chain_and_confounder():
    assert [a.to_list() for a in backdoor_adjustments(dag([("x", "y")]), "x", "y")] == [[]]
    g = dag([("z", "x"), ("z", "y"), ("x", "y")])
    assert [a.to_list() for a in backdoor_adjustments(g, "x", "y")] == [["z"]]


def test_cm_graph_has_no_adjustment():
    g = dag([("x1", "x2"), ("x2", "x3"), ("u", "x2"), ("u", "x3")], latent=["u"])
    assert backdoor_adjustments(g, "x2", "x3") == []


def test_d_separation_against_paths(rng):
    for _ in range(30):
        g = random_dag(rng, 6, 1)
        vs = list(g.vertices)
        for x, y in itertools.combinations(vs, 2):
            Z = frozenset(v for v in vs if v not in (x, y) and rng.random() < 0.3)
            ref = all(path_blocked(g.arcs, p, Z) for p in simple_paths(g.arcs, x, y))
            assert d_separated(g, {x}, {y}, Z) == ref


def test_backdoor_against_path_oracle(rng):
    for _ in range(25):
        g = random_dag(rng, int(rng.integers(3, 7)), int(rng.integers(0, 2)))
        obs = g.observables
        x, y = rng.choice(obs, size=2, replace=False)
        got = {a.variables for a in backdoor_adjustments(g, str(x), str(y))}
        assert got == backdoor_sets_oracle(g.vertices, g.latent, g.arcs, str(x), str(y))


def test_cycle_rejected():
    with pytest.raises(CausalError, match="cycle"):
        dag([("a", "b"), ("b", "a")])


def test_dag_json(tmp_path):
    doc = {"vertices": [{"name": "a"}, {"name": "b"}, {"name": "h", "latent": True}],
           "arcs": [["a", "b"], ["h", "a"], ["h", "b"]], "queries": [["b", "a"]]}
    p = tmp_path / "g.json"
    p.write_text(json.dumps(doc))
    g = CausalDag.load(p)
    assert g.latent == {"h"} and g.queries == (("b", "a"),)
    with pytest.raises(CausalError):
        CausalDag.from_dict({"arcs": []})


def test_triangle_certificate():
    res = split_vsets([["1", "2"], ["1", "3"], ["2", "3"]], mode="exhaustive")
    assert not res.feasible and res.splits_checked == 4
    doc = res.to_dict()
    assert doc["certificate"]["complete"] is True


def test_triangle_from_queries():
    g = dag([("1", "2"), ("2", "3")], queries=[("2", "1"), ("3", "2"), ("3", "1")])
    assert sorted(map(sorted, query_vsets(g))) == [["1", "2"], ["1", "3"], ["2", "3"]]
    assert not interfering_split(g, mode="exhaustive").feasible


def test_single_query_split():
    g = dag([("x", "y")], queries=[("y", "x")])
    res = interfering_split(g)
    assert res.feasible and res.anchor == ["x"] and res.shuffle == ["y"]


def test_disjoint_vsets_split():
    res = split_vsets([["a", "b"], ["c", "d"]], mode="exhaustive")
    assert res.feasible
    for vs in (["a", "b"], ["c", "d"]):
        assert set(vs) & set(res.anchor) and set(vs) & set(res.shuffle)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcdefg"), min_size=2, max_size=4, unique=True),
                min_size=1, max_size=6))
def test_split_exhaustive_matches_brute_force(vsets):
    verts = sorted({v for vs in vsets for v in vs})
    feasible = any(all(set(vs) & set(S) and set(vs) - set(S) for vs in vsets)
                   for r in range(len(verts) + 1) for S in itertools.combinations(verts, r))
    res = split_vsets(vsets, mode="exhaustive")
    assert res.feasible == feasible
    if feasible:
        for vs in vsets:
            assert set(vs) & set(res.anchor) and set(vs) & set(res.shuffle)
        heur = split_vsets(vsets, mode="heuristic", seed=0)
        assert heur.feasible
