"""Gaussian kernels, HSIC and its behaviour under shuffles of one kernel's rows.

HSIC here is the unnormalised trace tr(H Ku H Kv) with H = I - 11'/m.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .cp_engine import ClassUniform, Dense, Permutation, ShuffleSpec, to_matrix
from .data import Dataset

BANDWIDTH_FLOOR = 1e-12


@dataclass(frozen=True)
class KernelMatrix:
    mat: np.ndarray
    feature_subset: tuple[int, ...]
    bandwidth: float

    def __post_init__(self):
        K = np.asarray(self.mat, dtype=float)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError("kernel matrix must be square")
        if not np.allclose(K, K.T, atol=1e-12, rtol=0):
            raise ValueError("kernel matrix is not symmetric")
        object.__setattr__(self, "mat", K)

    @property
    def m(self) -> int:
        return self.mat.shape[0]


def _mat(K) -> np.ndarray:
    return K.mat if isinstance(K, KernelMatrix) else np.asarray(K, dtype=float)


def median_bandwidth(points: np.ndarray) -> float:
    dist = pdist(points)
    sigma = float(np.median(dist)) if dist.size else 0.0
    if sigma <= BANDWIDTH_FLOOR:
        warnings.warn("all points coincide; falling back to bandwidth 1", RuntimeWarning,
                      stacklevel=3)
        return 1.0
    return sigma


def gaussian_kernel(ds, subset, bandwidth="median") -> KernelMatrix:
    """exp(-|x - x'|^2 / (2 sigma^2)) over the columns in ``subset``.

    ``ds`` may be a Dataset or a plain observation matrix.
    """
    X = ds.observations if isinstance(ds, Dataset) else np.asarray(ds, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    subset = tuple(int(j) for j in subset)
    if not subset:
        raise ValueError("feature subset must be non-empty")
    P = X[:, list(subset)]
    if bandwidth == "median":
        sigma = median_bandwidth(P)
    else:
        sigma = float(bandwidth)
        if not sigma > 0:
            raise ValueError("bandwidth must be positive")
    sq = squareform(pdist(P, "sqeuclidean"))
    return KernelMatrix(np.exp(-sq / (2.0 * sigma * sigma)), subset, sigma)


def center(K) -> np.ndarray:
    """H K H without forming H."""
    K = _mat(K)
    r = K.mean(axis=1)
    return K - r[:, None] - r[None, :] + K.mean()


def hsic(Ku, Kv) -> float:
    return float(np.sum(center(Ku) * _mat(Kv)))


# -- single transposition ---------------------------------------------------------

def _delta_terms(A, B, rowA, rowB, l, l2, cross):
    """HSIC change when rows/cols l, l2 of B are swapped.

    ``cross`` is sum_i (A[l,i]-A[l2,i]) (B[l,i]-B[l2,i]); row sums are passed in.
    Works elementwise on arrays of index pairs.
    """
    m = A.shape[0]
    cov = cross - (rowA[l] - rowA[l2]) * (rowB[l] - rowB[l2]) / m
    Aaa, Abb, Aab = A[l, l], A[l2, l2], A[l, l2]
    Baa, Bbb, Bab = B[l, l], B[l2, l2], B[l, l2]
    rem = 2.0 * ((Aaa - Aab) * (Baa - Bab) + (Abb - Aab) * (Bbb - Bab)) \
        - (Aaa - Abb) * (Baa - Bbb)
    return -2.0 * cov + rem


def hsic_delta_elementary(Ku, Kv, l: int, l2: int, row_sums=None) -> float:
    """HSIC(Ku, M Kv M') - HSIC(Ku, Kv) for the transposition of l and l2, in O(m).

    ``row_sums`` may carry cached ``(Ku @ 1, Kv @ 1)``.
    """
    A, B = _mat(Ku), _mat(Kv)
    m = A.shape[0]
    if not (0 <= l < m and 0 <= l2 < m):
        raise IndexError(f"pair ({l}, {l2}) out of range for m={m}")
    if l == l2:
        raise ValueError("l and l2 must differ")
    rowA, rowB = row_sums if row_sums is not None else (A.sum(axis=1), B.sum(axis=1))
    cross = float(np.dot(A[l] - A[l2], B[l] - B[l2]))
    return float(_delta_terms(A, B, rowA, rowB, l, l2, cross))


def hsic_deltas(Ku, Kv, ls, l2s, AB=None) -> np.ndarray:
    """Vectorised ``hsic_delta_elementary`` over arrays of pairs.

    ``AB`` may carry the product Ku @ Kv, which turns each cross term into O(1).
    """
    A, B = _mat(Ku), _mat(Kv)
    ls = np.asarray(ls, dtype=int)
    l2s = np.asarray(l2s, dtype=int)
    if AB is None:
        cross = np.einsum("ij,ij->i", A[ls] - A[l2s], B[ls] - B[l2s])
    else:
        cross = AB[ls, ls] + AB[l2s, l2s] - AB[ls, l2s] - AB[l2s, ls]
    return _delta_terms(A, B, A.sum(axis=1), B.sum(axis=1), ls, l2s, cross)


# -- general shuffles ------------------------------------------------------------

@dataclass(frozen=True)
class SpectralSummary:
    u_tilde: np.ndarray
    v_tilde: np.ndarray


def spectral_summary(Ku, Kv, method: str = "direct") -> SpectralSummary:
    """u~ = (1/m) sum_i lambda_i (1'u_i) u_i, which equals Ku 1 / m."""
    A, B = _mat(Ku), _mat(Kv)
    m = A.shape[0]
    if method == "direct":
        return SpectralSummary(A.sum(axis=1) / m, B.sum(axis=1) / m)
    if method != "eig":
        raise ValueError("method must be 'direct' or 'eig'")

    def proj(K):
        lam, U = np.linalg.eigh(K)
        return U @ (lam * U.sum(axis=0)) / m

    return SpectralSummary(proj(A), proj(B))


def hsic_shift_spectral(Ku, Kv, shuffle: ShuffleSpec, labels=None, method="direct") -> float:
    """The row-sum term 2m u~'(I - M) v~ of the HSIC shift under M.

    This is only part of HSIC(Ku, M Kv M') - HSIC(Ku, Kv); for a doubly stochastic M the rest is
    tr(Ku (M Kv M' - Kv)), see ``hsic_shift``.
    """
    A = _mat(Ku)
    m = A.shape[0]
    s = spectral_summary(Ku, Kv, method)
    Mv = _apply_rows(shuffle, s.v_tilde[:, None], labels, m)[:, 0]
    return float(2.0 * m * s.u_tilde @ (s.v_tilde - Mv))


def hsic_shift(Ku, Kv, shuffle: ShuffleSpec, labels=None) -> float:
    """Exact HSIC(Ku, M Kv M') - HSIC(Ku, Kv) by recomputation."""
    A = center(Ku)
    return float(np.sum(A * (shuffled_kernel(Kv, shuffle, labels) - _mat(Kv))))


def shuffled_kernel(Kv, shuffle: ShuffleSpec, labels=None) -> np.ndarray:
    """M Kv M'."""
    B = _mat(Kv)
    m = B.shape[0]
    return _apply_rows(shuffle, _apply_rows(shuffle, B, labels, m).T, labels, m)


def _apply_rows(shuffle, X, labels, m):
    if isinstance(shuffle, Permutation):
        return X[shuffle.perm]
    if isinstance(shuffle, Dense):
        return shuffle.mat @ X
    if isinstance(shuffle, ClassUniform):
        if labels is None:
            raise ValueError("ClassUniform needs labels")
        return shuffle.apply(X, labels)
    return to_matrix(shuffle, labels) @ X


# -- expectation over uniform transpositions --------------------------------------

def hsic_remainder(Ku, Kv) -> float:
    """R^{u,v} = sum_i Ku_ii Kv_ii - (1/(2m)) sum_i (Ku_ii Kv_.i + Ku_.i Kv_ii).

    For unit-diagonal kernels this is m (1 - (Ku.. + Kv..) / (2 m^2)).
    """
    A, B = _mat(Ku), _mat(Kv)
    m = A.shape[0]
    dA, dB = np.diag(A), np.diag(B)
    return float(dA @ dB - (dA @ B.sum(axis=0) + A.sum(axis=0) @ dB) / (2.0 * m))


def expected_hsic_after_elementary(Ku, Kv) -> float:
    """Mean of HSIC(Ku, M Kv M') over the m(m-1)/2 transpositions M.

    Equals (1 - 4/(m-1)) HSIC + (2 m D + 4 S - 4 C + 2 tr Ku tr Kv) / (m (m-1))
    with D = sum_i Ku_ii Kv_ii, S = sum Ku*Kv and
    C = sum_i (Ku_ii (Kv 1)_i + (Ku 1)_i Kv_ii).
    """
    A, B = _mat(Ku), _mat(Kv)
    m = A.shape[0]
    if m < 2:
        raise ValueError("need m >= 2")
    dA, dB = np.diag(A), np.diag(B)
    D = float(dA @ dB)
    S = float(np.sum(A * B))
    C = float(dA @ B.sum(axis=1) + A.sum(axis=1) @ dB)
    h = hsic(A, B)
    return (1.0 - 4.0 / (m - 1)) * h + (2 * m * D + 4 * S - 4 * C
                                        + 2 * dA.sum() * dB.sum()) / (m * (m - 1))


# -- permutation test ------------------------------------------------------------

@dataclass(frozen=True)
class PermutationTest:
    statistic: float
    p_value: float
    raw_p_value: float
    resamples: int


def permutation_test(Ku, Kv, resamples: int, seed=None) -> PermutationTest:
    """Null by unrestricted relabeling of Kv; p is add-one smoothed, raw p is not."""
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    A, B = _mat(Ku), _mat(Kv)
    Ac = center(A)
    observed = float(np.sum(Ac * B))
    rng = np.random.default_rng(seed)
    m = A.shape[0]
    tol = 1e-12 * max(1.0, abs(observed))
    hits = 0
    for _ in range(resamples):
        p = rng.permutation(m)
        if np.sum(Ac * B[np.ix_(p, p)]) >= observed - tol:
            hits += 1
    return PermutationTest(observed, (1 + hits) / (resamples + 1), hits / resamples, resamples)


def pvalue_permutation_test(Ku, Kv, resamples: int = 999, seed=None) -> float:
    return permutation_test(Ku, Kv, resamples, seed).p_value


# -- debug dump ------------------------------------------------------------------

def write_kernel(path, K) -> None:
    """8-byte little-endian m, then m*m little-endian doubles, row-major."""
    A = np.ascontiguousarray(_mat(K), dtype="<f8")
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<Q", A.shape[0]))
        fh.write(A.tobytes(order="C"))


def read_kernel(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (m,) = struct.unpack("<Q", raw[:8])
    if len(raw) != 8 + 8 * m * m:
        raise ValueError("kernel dump has the wrong length")
    return np.frombuffer(raw[8:], dtype="<f8").reshape(m, m).copy()
