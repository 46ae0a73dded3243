"""Crossover Process: feature splits, shuffle matrices, composition and cycle statistics.

A permutation ``perm`` acts on the shuffle block as the matrix M with
``M[i, perm[i]] = 1``, so row ``i`` of the output receives the shuffle values
of input row ``perm[i]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, signed_mean

COLUMN_SUM_TOL = 1e-10
MEAN_OPERATOR_TOL = 1e-10


class CPError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSplit:
    anchor: tuple[int, ...]
    shuffle: tuple[int, ...]

    def __post_init__(self):
        a = tuple(sorted(int(j) for j in self.anchor))
        s = tuple(sorted(int(j) for j in self.shuffle))
        if not a or not s:
            raise CPError("anchor and shuffle sets must both be non-empty")
        if set(a) & set(s):
            raise CPError("anchor and shuffle sets overlap")
        if len(set(a)) != len(a) or len(set(s)) != len(s):
            raise CPError("duplicate feature index in split")
        object.__setattr__(self, "anchor", a)
        object.__setattr__(self, "shuffle", s)

    @property
    def d(self) -> int:
        return len(self.anchor) + len(self.shuffle)

    def check(self, d: int) -> None:
        if set(self.anchor) | set(self.shuffle) != set(range(d)):
            raise CPError(f"split does not cover the {d} features exactly")

    @classmethod
    def first_half(cls, d: int) -> "FeatureSplit":
        """Anchor = the first floor(d/2) features."""
        h = d // 2
        return cls(tuple(range(h)), tuple(range(h, d)))

    @classmethod
    def from_names(cls, names, anchor, shuffle) -> "FeatureSplit":
        names = list(names)
        try:
            return cls(tuple(names.index(n) for n in anchor), tuple(names.index(n) for n in shuffle))
        except ValueError as e:
            raise CPError(f"unknown feature in split: {e}") from None


class ShuffleSpec:
    """Base class for shuffle matrices."""

    def size(self, labels) -> int:
        return len(labels)

    def apply(self, block: np.ndarray, labels: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def matrix(self, labels) -> np.ndarray:
        return self.apply(np.eye(len(labels)), np.asarray(labels))


@dataclass(frozen=True)
class Permutation(ShuffleSpec):
    perm: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.perm, dtype=np.int64).ravel()
        if not np.array_equal(np.sort(p), np.arange(len(p))):
            raise CPError("perm is not a bijection on range(m)")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "perm", p)

    def __len__(self) -> int:
        return len(self.perm)

    def __eq__(self, other) -> bool:
        return isinstance(other, Permutation) and np.array_equal(self.perm, other.perm)

    def __hash__(self):
        return hash(self.perm.tobytes())

    @classmethod
    def identity(cls, m: int) -> "Permutation":
        return cls(np.arange(m))

    @classmethod
    def transposition(cls, m: int, l: int, l2: int) -> "Permutation":
        p = np.arange(m)
        p[[l, l2]] = p[[l2, l]]
        return cls(p)

    def size(self, labels=None) -> int:
        return len(self.perm)

    def apply(self, block, labels=None):
        return np.asarray(block)[self.perm]

    def matrix(self, labels=None) -> np.ndarray:
        m = len(self.perm)
        M = np.zeros((m, m))
        M[np.arange(m), self.perm] = 1.0
        return M


@dataclass(frozen=True)
class Dense(ShuffleSpec):
    mat: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.mat, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise CPError("dense shuffle matrix must be square")
        dev = np.max(np.abs(M.sum(axis=0) - 1.0))
        if dev > COLUMN_SUM_TOL:
            raise CPError(f"columns must sum to 1 (max deviation {dev:.3g})")
        object.__setattr__(self, "mat", M)

    def size(self, labels=None) -> int:
        return self.mat.shape[0]

    def apply(self, block, labels=None):
        return self.mat @ np.asarray(block)

    def matrix(self, labels=None) -> np.ndarray:
        return self.mat.copy()


@dataclass(frozen=True)
class ClassUniform(ShuffleSpec):
    """Replace every shuffle value by its class mean; applied in O(m)."""

    def apply(self, block, labels):
        block = np.asarray(block, dtype=float)
        labels = np.asarray(labels)
        out = np.empty_like(block)
        for c in (1, -1):
            rows = labels == c
            if rows.any():
                out[rows] = block[rows].mean(axis=0)
        return out


def _check_size(shuffle: ShuffleSpec, labels) -> None:
    m = len(labels)
    if shuffle.size(labels) != m:
        raise CPError(f"shuffle acts on {shuffle.size(labels)} rows, dataset has {m}")


def apply_cp(ds: Dataset, split: FeatureSplit, shuffle: ShuffleSpec) -> Dataset:
    """Keep the anchor columns, left-multiply the shuffle columns by M."""
    split.check(ds.d)
    _check_size(shuffle, ds.labels)
    X = np.array(ds.observations)
    cols = list(split.shuffle)
    X[:, cols] = shuffle.apply(ds.observations[:, cols], ds.labels)
    return ds.with_observations(X)


def to_matrix(shuffle: ShuffleSpec, labels) -> np.ndarray:
    return shuffle.matrix(np.asarray(labels))


def is_block_class(shuffle: ShuffleSpec, labels) -> bool:
    labels = np.asarray(labels)
    _check_size(shuffle, labels)
    if isinstance(shuffle, ClassUniform):
        return True
    if isinstance(shuffle, Permutation):
        return bool(np.all(labels[shuffle.perm] == labels))
    M = to_matrix(shuffle, labels)
    cross = labels[:, None] != labels[None, :]
    return bool(np.all(M[cross] == 0.0))


def _as_perm(p) -> np.ndarray:
    if isinstance(p, Permutation):
        return p.perm
    if isinstance(p, ShuffleSpec):
        raise CPError(f"{type(p).__name__} is not a permutation and is not invertible")
    return Permutation(p).perm


def compose(outer: Permutation, inner: Permutation) -> Permutation:
    """Permutation whose matrix is outer @ inner."""
    o, i = _as_perm(outer), _as_perm(inner)
    if len(o) != len(i):
        raise CPError("size mismatch in compose")
    return Permutation(i[o])


def invert_cp(shuffle: Permutation) -> Permutation:
    p = _as_perm(shuffle)
    inv = np.empty_like(p)
    inv[p] = np.arange(len(p))
    return Permutation(inv)


@dataclass(frozen=True)
class CycleStats:
    odd_cycles: int
    fixed_points: int
    non_fixed: int

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.odd_cycles, self.fixed_points, self.non_fixed)


def cycle_lengths(perm) -> list[int]:
    p = _as_perm(perm)
    seen = np.zeros(len(p), dtype=bool)
    lengths = []
    for start in range(len(p)):
        if seen[start]:
            continue
        n, j = 0, start
        while not seen[j]:
            seen[j] = True
            j = p[j]
            n += 1
        lengths.append(n)
    return lengths


def cycle_stats(perm, labels=None) -> CycleStats:
    """Odd cycles of length >= 3, fixed points and moved points."""
    lengths = cycle_lengths(perm)
    fixed = sum(1 for n in lengths if n == 1)
    odd = sum(1 for n in lengths if n >= 3 and n % 2 == 1)
    return CycleStats(odd, fixed, sum(lengths) - fixed)


def mean_operator_invariant(ds: Dataset, split: FeatureSplit,
                            shuffle: ShuffleSpec) -> tuple[bool, float]:
    after = apply_cp(ds, split, shuffle)
    dev = float(np.max(np.abs(signed_mean(ds.observations, ds.labels)
                              - signed_mean(after.observations, after.labels))))
    return dev <= MEAN_OPERATOR_TOL, dev


def random_block_class_permutation(labels, rng: np.random.Generator) -> Permutation:
    """Uniform permutation inside each class."""
    labels = np.asarray(labels)
    p = np.arange(len(labels))
    for c in (1, -1):
        idx = np.flatnonzero(labels == c)
        p[idx] = idx[rng.permutation(len(idx))]
    return Permutation(p)


def save_permutation(path, perm: Permutation, *, block_class: bool, seed=None,
                     iterations=None, **extra) -> None:
    meta = {"block_class": bool(block_class), "seed": seed, "iterations": iterations}
    meta.update(extra)
    doc = {"permutation": [int(v) for v in perm.perm], "metadata": meta}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_permutation(path) -> tuple[Permutation, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(doc, list):
        return Permutation(doc), {}
    try:
        return Permutation(doc["permutation"]), dict(doc.get("metadata", {}))
    except (KeyError, TypeError):
        raise CPError("permutation file must hold a 'permutation' array") from None
