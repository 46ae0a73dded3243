"""Rademacher complexity of a crossover (RCP): exact values for tiny m and upper bounds."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cp_engine import CycleStats, FeatureSplit, Permutation, ShuffleSpec, cycle_stats, to_matrix
from .data import Dataset

EPS_STAR = 1.0 - 1.0 / (2.0 * math.sqrt(2.0))
DEFAULT_M_CAP = 20
_BLOCK = 1 << 14


class ComplexityError(ValueError):
    pass


def kappa(delta: float, gamma: float, eps: float = EPS_STAR) -> float:
    return 1.0 - ((1.0 - delta) * (1.0 - eps) * (1.0 - gamma)) ** 2


def u_factor(m: int, delta: float, gamma: float, eps: float = EPS_STAR) -> float:
    """1/m + kappa (1 - 1/m)."""
    return 1.0 / m + kappa(delta, gamma, eps) * (1.0 - 1.0 / m)


def shuffle_differences(ds: Dataset, split: FeatureSplit, shuffle: ShuffleSpec) -> np.ndarray:
    """Rows of (I - M) s F^s."""
    split.check(ds.d)
    S = ds.observations[:, list(split.shuffle)]
    return S - shuffle.apply(S, ds.labels)


def sign_vectors(m: int):
    """All 2^m sign vectors, in blocks."""
    bits = np.arange(m, dtype=np.int64)
    for start in range(0, 1 << m, _BLOCK):
        codes = np.arange(start, min(start + _BLOCK, 1 << m), dtype=np.int64)
        yield 1.0 - 2.0 * ((codes[:, None] >> bits) & 1)


def expected_sup_norm(delta_rows: np.ndarray, norm: str = "l2") -> float:
    """E_sigma |sum_i sigma_i delta_i| by full enumeration."""
    D = np.asarray(delta_rows, dtype=float)
    m = D.shape[0]
    ord_ = {"l2": 2, "linf": 1}.get(norm)
    if ord_ is None:
        raise ComplexityError("norm must be 'l2' or 'linf'")
    total = 0.0
    for sig in sign_vectors(m):
        total += float(np.linalg.norm(sig @ D, ord=ord_, axis=1).sum())
    return total / (1 << m)


def rcp_exact_linear(ds: Dataset, split: FeatureSplit, perm: ShuffleSpec, r_s: float = 1.0,
                     m_cap: int = DEFAULT_M_CAP, norm: str = "l2") -> float:
    """E_sigma sup_theta (1/m) sum_i sigma_i theta'delta_i over a ball of radius r_s.

    ``norm="l2"``: Euclidean ball, sup = (r_s/m) |sum sigma delta|_2.
    ``norm="linf"``: box |theta_j| <= r_s, sup = (r_s/m) |sum sigma delta|_1.
    """
    if ds.m > m_cap:
        raise ComplexityError(f"m={ds.m} exceeds the enumeration cap {m_cap}")
    D = shuffle_differences(ds, split, perm)
    return r_s / ds.m * expected_sup_norm(D, norm)


def rademacher_exact_linear(points: np.ndarray, r: float = 1.0, m_cap: int = DEFAULT_M_CAP,
                            norm: str = "l2") -> float:
    """Empirical Rademacher complexity E sup |(1/m) sum sigma_i theta'x_i| of a norm ball."""
    P = np.asarray(points, dtype=float)
    if P.shape[0] > m_cap:
        raise ComplexityError(f"m={P.shape[0]} exceeds the enumeration cap {m_cap}")
    return r / P.shape[0] * expected_sup_norm(P, norm)


@dataclass(frozen=True)
class CorrelationParams:
    delta: float
    gamma: float
    used_rows: int
    excluded_rows: int


def correlation_params(delta_rows: np.ndarray, zero_tol: float = 1e-15) -> CorrelationParams:
    """Smallest (delta, gamma) such that, over G = D D',

    G_ii >= (1 - delta) tr(G) / m  and  |G_ii'| >= (1 - gamma) sqrt(G_ii G_i'i').

    Rows with G_ii = 0 carry no signal and are dropped; m counts the kept rows.
    """
    D = np.asarray(delta_rows, dtype=float)
    G = D @ D.T
    g = np.diag(G)
    keep = g > zero_tol * max(1.0, float(g.max(initial=0.0)))
    n = int(keep.sum())
    if n == 0:
        return CorrelationParams(0.0, 0.0, 0, len(g))
    G = G[np.ix_(keep, keep)]
    g = g[keep]
    delta = max(0.0, 1.0 - n * g.min() / g.sum())
    if n == 1:
        gamma = 0.0
    else:
        cos = np.abs(G) / np.sqrt(np.outer(g, g))
        np.fill_diagonal(cos, np.inf)
        gamma = float(min(1.0, max(0.0, 1.0 - cos.min())))
    return CorrelationParams(float(delta), gamma, n, len(keep) - n)


def estimate_correlation_params(delta_rows: np.ndarray) -> tuple[float, float]:
    p = correlation_params(delta_rows)
    return p.delta, p.gamma


def centered_inner_product(A, B, M) -> float:
    """tr((I - M)' A (I - M) B)."""
    A, B, M = (np.asarray(x, dtype=float) for x in (A, B, M))
    IM = np.eye(A.shape[0]) - M
    return float(np.trace(IM.T @ A @ IM @ B))


def correlation_decomposition(ds: Dataset, split: FeatureSplit, perm: Permutation) -> np.ndarray:
    """Per shuffle column j: 2 var_j (1 - rho(col_j, permuted col_j)).

    Their sum equals (1/m) <I, K^s>_M for a permutation M; constant columns give 0.
    """
    S = ds.observations[:, list(split.shuffle)]
    P = perm.apply(S)
    out = np.zeros(S.shape[1])
    for j in range(S.shape[1]):
        v = S[:, j].var()
        if v <= 0:
            continue
        a, b = S[:, j] - S[:, j].mean(), P[:, j] - P[:, j].mean()
        rho = float(a @ b) / (len(a) * v)
        out[j] = 2.0 * v * (1.0 - rho)
    return out


@dataclass
class RcpReport:
    bound_linear: float
    u_factor: float
    delta: float
    gamma: float
    epsilon_star: float
    centered_ip: float
    used_rows: int
    excluded_rows: int
    cycle_stats: CycleStats | None = None
    exact: float | None = None
    bound_dag: float | None = None
    expected_bound: float | None = None
    decomposition: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.cycle_stats is not None:
            d["cycle_stats"] = asdict(self.cycle_stats)
        return d


def rcp_report(ds: Dataset, split: FeatureSplit, shuffle: ShuffleSpec, r_s: float = 1.0,
               exact: bool = False, m_cap: int = DEFAULT_M_CAP) -> RcpReport:
    """Bound (u r_s / m) sqrt(<I, K^s>_M) with u from the (delta, gamma) of the difference rows.

    Rows left fixed by M are excluded and u uses the number of moved rows, which
    can only raise u.
    """
    D = shuffle_differences(ds, split, shuffle)
    ip = float(np.sum(D * D))
    p = correlation_params(D)
    u = u_factor(p.used_rows, p.delta, p.gamma) if p.used_rows else 0.0
    bound = u * r_s / ds.m * math.sqrt(ip)
    report = RcpReport(bound, u, p.delta, p.gamma, EPS_STAR, ip, p.used_rows, p.excluded_rows)
    if isinstance(shuffle, Permutation):
        report.cycle_stats = cycle_stats(shuffle)
        report.decomposition = correlation_decomposition(ds, split, shuffle).tolist()
    if exact:
        report.exact = rcp_exact_linear(ds, split, shuffle, r_s, m_cap)
    return report


def rcp_bound_linear(ds: Dataset, split: FeatureSplit, shuffle: ShuffleSpec,
                     r_s: float = 1.0) -> float:
    return rcp_report(ds, split, shuffle, r_s).bound_linear


def rcp_bound_dag(h_plus_count, m: int, K_s: float, odd_cycles: int, epsilon: float) -> float:
    """K_s sqrt((2/m) log(|H+| / (1+eps)^oc)); requires log|H+| >= (4 eps / 3) m."""
    log_h = math.log(h_plus_count)
    if log_h < 4.0 * epsilon * m / 3.0:
        raise ComplexityError(f"precondition log|H+| >= 4 eps m / 3 fails "
                              f"({log_h:.6g} < {4.0 * epsilon * m / 3.0:.6g})")
    inner = log_h - odd_cycles * math.log1p(epsilon)
    return K_s * math.sqrt(max(0.0, 2.0 / m * inner))


def mean_pair_sqdist(points: np.ndarray) -> float:
    """Mean of |x_i - x_i'|^2 over ordered pairs i != i'."""
    P = np.asarray(points, dtype=float)
    n = P.shape[0]
    if n < 2:
        return 0.0
    c = P - P.mean(axis=0)
    return 2.0 * n * float(np.sum(c * c)) / (n * (n - 1))


def expected_rcp_bound(ds: Dataset, split: FeatureSplit, k: int, class_restriction: str = "all",
                       r_s: float = 1.0, u: float | None = None) -> float:
    """u (r_s / sqrt(m)) sqrt((k/m) Q) for a uniform permutation moving exactly k rows.

    Q is the mean pairwise squared distance of the shuffle features over the
    rows allowed to move. Without an explicit ``u``: for k = 2 every transposition
    has two opposite difference rows, giving u = (1 + kappa(0, 0)) / 2; otherwise
    u = 1, which holds for every M.
    """
    if k < 0:
        raise ComplexityError("k must be non-negative")
    if k == 0:
        return 0.0
    rows = {"all": np.ones(ds.m, dtype=bool), "pos": ds.labels == 1,
            "neg": ds.labels == -1}.get(class_restriction)
    if rows is None:
        raise ComplexityError("class_restriction must be all, pos or neg")
    if k == 1 or k > int(rows.sum()):
        raise ComplexityError(f"no permutation moves exactly {k} of {int(rows.sum())} rows")
    Q = mean_pair_sqdist(ds.observations[np.ix_(rows, list(split.shuffle))])
    if u is None:
        u = u_factor(2, 0.0, 0.0) if k == 2 else 1.0
    return u * r_s / math.sqrt(ds.m) * math.sqrt(k / ds.m * Q)


def rademacher_bound_linear_improved(ds, r_x: float | None = None, r_theta: float = 1.0
                                     ) -> tuple[float, float]:
    """(1/m + kappa (1 - 1/m)) r_x r_theta / sqrt(m) with (delta, gamma) from the raw rows.

    Here gamma uses the mean |cosine| over distinct pairs. Returns (bound, baseline).
    """
    X = ds.observations if isinstance(ds, Dataset) else np.asarray(ds, dtype=float)
    m = X.shape[0]
    norms = np.sum(X * X, axis=1)
    if r_x is None:
        r_x = float(np.sqrt(norms.max()))
    baseline = r_x * r_theta / math.sqrt(m)
    keep = norms > 0
    n = int(keep.sum())
    if n < 2:
        return baseline, baseline
    Xk, g = X[keep], norms[keep]
    delta = max(0.0, 1.0 - n * g.min() / g.sum())
    cos = np.abs(Xk @ Xk.T) / np.sqrt(np.outer(g, g))
    mean_cos = (cos.sum() - np.trace(cos)) / (n * (n - 1))
    gamma = min(1.0, max(0.0, 1.0 - float(mean_cos)))
    return u_factor(m, delta, gamma) * baseline, baseline


def generalization_bound_report(phi_risk_cp: float, rcp_bound: float, rademacher_bound: float,
                                K_phi: float, K_s: float, b_phi: float = 1.0, m: int = 1,
                                delta_conf: float = 0.05) -> float:
    """risk + RCP + (4/b_phi) Rad + (2 K_phi + K_s) sqrt((2/m) log(3/delta))."""
    if not 0 < delta_conf < 1:
        raise ComplexityError("confidence delta must lie in (0, 1)")
    return (phi_risk_cp + rcp_bound + 4.0 / b_phi * rademacher_bound
            + (2.0 * K_phi + K_s) * math.sqrt(2.0 / m * math.log(3.0 / delta_conf)))


def dense_centered_ip(ds: Dataset, split: FeatureSplit, shuffle: ShuffleSpec) -> float:
    """<I, K^s>_M through explicit matrices; a slow cross-check."""
    S = ds.observations[:, list(split.shuffle)]
    return centered_inner_product(np.eye(ds.m), S @ S.T, to_matrix(shuffle, ds.labels))
