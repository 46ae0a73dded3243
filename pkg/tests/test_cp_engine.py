import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpforge.cp_engine import (ClassUniform, CPError, Dense, FeatureSplit, Permutation,
                               apply_cp, compose, cycle_stats, invert_cp, is_block_class,
                               load_permutation, mean_operator_invariant,
                               random_block_class_permutation, save_permutation, to_matrix)
from cpforge.data import Dataset
from cpforge.synthetic import random_dataset, toy_domain

perms = st.integers(2, 12).flatmap(lambda m: st.permutations(list(range(m))))


def test_split_validation():
    FeatureSplit((0,), (1,)).check(2)
    with pytest.raises(CPError):
        FeatureSplit((0, 1), (1,))
    with pytest.raises(CPError):
        FeatureSplit((), (1,))
    with pytest.raises(CPError):
        FeatureSplit((0,), (5,)).check(3)
    assert FeatureSplit.first_half(5) == FeatureSplit((0, 1), (2, 3, 4))
    assert FeatureSplit.from_names(["a", "b", "c"], ["c"], ["a"]) == FeatureSplit((2,), (0,))


def test_apply_cp_matches_matrix_product(rng):
    ds = random_dataset(9, 4, rng)
    split = FeatureSplit((0, 2), (1, 3))
    p = Permutation(rng.permutation(9))
    out = apply_cp(ds, split, p).observations
    M = to_matrix(p, ds.labels)
    np.testing.assert_array_equal(out[:, [0, 2]], ds.observations[:, [0, 2]])
    np.testing.assert_allclose(out[:, [1, 3]], M @ ds.observations[:, [1, 3]])
    assert np.array_equal(apply_cp(ds, split, Permutation.identity(9)).observations,
                          ds.observations)


def test_four_by_three_crossover():
    # rows: two positives, two negatives; anchor = first feature
    X = np.array([[1.0, 10.0, 100.0], [2.0, 20.0, 200.0], [3.0, 30.0, 300.0], [4.0, 40.0, 400.0]])
    ds = Dataset(X, [1, 1, -1, -1], ("a", "b", "c"))
    out = apply_cp(ds, FeatureSplit((0,), (1, 2)), Permutation([1, 0, 2, 3])).observations
    np.testing.assert_array_equal(out, [[1, 20, 200], [2, 10, 100], [3, 30, 300], [4, 40, 400]])


def test_class_uniform_replaces_by_class_means(rng):
    ds = random_dataset(11, 3, rng, m_pos=4)
    split = FeatureSplit((0,), (1, 2))
    out = apply_cp(ds, split, ClassUniform()).observations
    for c in (1, -1):
        rows = ds.labels == c
        np.testing.assert_allclose(out[rows][:, 1:], np.broadcast_to(
            ds.observations[rows][:, 1:].mean(axis=0), (rows.sum(), 2)), atol=1e-14)
    M = to_matrix(ClassUniform(), ds.labels)
    np.testing.assert_allclose(M[:4, :4], np.full((4, 4), 0.25))
    assert np.all(M[:4, 4:] == 0)
    assert is_block_class(ClassUniform(), ds.labels)


def test_block_class_detection():
    labels = np.array([1, 1, -1])
    assert is_block_class(Permutation.identity(3), labels)
    assert not is_block_class(Permutation.transposition(3, 1, 2), labels)
    assert is_block_class(Permutation.transposition(3, 0, 1), labels)


def test_dense_column_sum_check():
    with pytest.raises(CPError):
        Dense(np.array([[0.5, 0.0], [0.4, 1.0]]))
    Dense(np.array([[0.5, 0.0], [0.5, 1.0]]))


def test_permutation_validation():
    with pytest.raises(CPError):
        Permutation([0, 0, 1])


@settings(max_examples=80, deadline=None)
@given(st.data())
def test_compose_is_matrix_product(data):
    m = data.draw(st.integers(2, 10))
    a = Permutation(data.draw(st.permutations(list(range(m)))))
    b = Permutation(data.draw(st.permutations(list(range(m)))))
    np.testing.assert_array_equal(compose(a, b).matrix(), a.matrix() @ b.matrix())
    ident = Permutation.identity(m)
    assert compose(ident, a) == a
    assert compose(a, invert_cp(a)) == ident


def test_two_transpositions_vs_dense_product():
    t1, t2 = Permutation.transposition(6, 0, 3), Permutation.transposition(6, 3, 5)
    np.testing.assert_array_equal(compose(t1, t2).matrix(), t1.matrix() @ t2.matrix())


def test_invert(rng):
    p = Permutation(rng.permutation(10))
    assert invert_cp(invert_cp(p)) == p
    assert invert_cp(Permutation.identity(4)) == Permutation.identity(4)
    with pytest.raises(CPError, match="not invertible"):
        invert_cp(ClassUniform())


def _cycles_oracle(perm):
    seen, lens = set(), []
    for s in range(len(perm)):
        if s in seen:
            continue
        n, j = 0, s
        while j not in seen:
            seen.add(j)
            j = perm[j]
            n += 1
        lens.append(n)
    return lens


def test_cycle_stats_examples():
    assert cycle_stats(Permutation.identity(7)).as_tuple() == (0, 7, 0)
    assert cycle_stats(Permutation([1, 2, 0, 3, 4])).as_tuple() == (1, 2, 3)


@settings(max_examples=100, deadline=None)
@given(perms)
def test_cycle_stats_oracle(perm):
    lens = _cycles_oracle(perm)
    cs = cycle_stats(Permutation(perm))
    assert cs.odd_cycles == sum(1 for n in lens if n % 2 == 1 and n > 1)
    assert cs.fixed_points == sum(1 for n in lens if n == 1)
    assert cs.non_fixed == len(perm) - cs.fixed_points


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_block_class_preserves_mean_operator(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(int(rng.integers(2, 40)), int(rng.integers(2, 6)), rng)
    split = FeatureSplit.first_half(ds.d)
    p = random_block_class_permutation(ds.labels, rng)
    assert is_block_class(p, ds.labels)
    ok, dev = mean_operator_invariant(ds, split, p)
    assert ok and dev <= 1e-10


def test_cross_class_counterexample():
    ds = Dataset([[0.0, 1.0], [0.0, 5.0], [0.0, -2.0]], [1, 1, -1], ("a", "b"))
    ok, dev = mean_operator_invariant(ds, FeatureSplit((0,), (1,)), Permutation.transposition(3, 0, 2))
    # row 0 (+) gets -2 and row 2 (-) gets 1: mean changes by 2*(-3)/3
    assert not ok
    assert dev == pytest.approx(2.0)
    assert mean_operator_invariant(ds, FeatureSplit((0,), (1,)), ClassUniform())[0]


def test_toy_domain_shuffle_is_block_class():
    ds, split, p = toy_domain()
    assert is_block_class(p, ds.labels)
    np.testing.assert_array_equal(apply_cp(ds, split, p).observations,
                                  [[0, 1], [0, 1], [1, 0], [1, 0], [-1, -1]])


def test_permutation_json_round_trip(tmp_path, rng):
    p = Permutation(rng.permutation(8))
    save_permutation(tmp_path / "p.json", p, block_class=False, seed=3, iterations=5)
    q, meta = load_permutation(tmp_path / "p.json")
    assert q == p and meta["seed"] == 3 and meta["block_class"] is False
