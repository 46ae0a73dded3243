"""Partial-correlation jamming and back-door adjustment interference on causal DAGs."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cp_engine import FeatureSplit, Permutation, random_block_class_permutation
from .data import Dataset

MAX_BRUTE_OBSERVABLES = 20
MAX_EXHAUSTIVE_SPLIT = 24
JAM_MIN_DECREASE = 1e-12


class CausalError(ValueError):
    pass


# -- partial correlation ---------------------------------------------------------

def _cols(ds):
    return ds.observations if isinstance(ds, Dataset) else np.asarray(ds, dtype=float)


def corr(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        raise CausalError("correlation undefined for a constant column")
    return float(a @ b) / den


def partial_from_corrs(r13, r12, r23):
    return (r13 - r12 * r23) / np.sqrt((1.0 - r12 ** 2) * (1.0 - r23 ** 2))


def partial_correlation(ds, j: int, k: int, given: int) -> float:
    """rho_{(jk).l} = (r_jk - r_jl r_kl) / sqrt((1 - r_jl^2)(1 - r_kl^2))."""
    X = _cols(ds)
    r_jk = corr(X[:, j], X[:, k])
    r_jl = corr(X[:, j], X[:, given])
    r_kl = corr(X[:, k], X[:, given])
    if max(r_jl ** 2, r_kl ** 2) >= 1.0 - 1e-12:
        raise CausalError("degenerate conditioning variable (|rho| = 1)")
    return float(np.clip(partial_from_corrs(r_jk, r_jl, r_kl), -1.0, 1.0))


def _class_gap(col: np.ndarray, labels: np.ndarray) -> float:
    """(E[x|y=+1] - E[x|y=-1]) / sqrt(var x)."""
    v = col.var()
    if v <= 0:
        raise CausalError("constant column")
    return float(col[labels == 1].mean() - col[labels == -1].mean()) / math.sqrt(v)


def cm_bound_R(ds: Dataset, epsilon: float = 0.5, x1: int = 0, x2: int = 1, x3: int = 2) -> float:
    """R = p(1-p) (mu1 - rho12 mu2) mu3 / (1 - eps), mu_j the standardised class-mean gap.

    Valid as an upper bound on the shuffled partial correlation for eps in [1/2, 1)
    when rho12^2 and the shuffled rho23^2 stay below 1 - eps.
    """
    if not 0.5 <= epsilon < 1.0:
        raise CausalError("epsilon must lie in [1/2, 1)")
    X, y = ds.observations, ds.labels
    p = ds.m_pos / ds.m
    mu = [_class_gap(X[:, j], y) for j in (x1, x2, x3)]
    r12 = corr(X[:, x1], X[:, x2])
    return p * (1.0 - p) * (mu[0] - r12 * mu[1]) * mu[2] / (1.0 - epsilon)


@dataclass
class JamResult:
    permutation: Permutation
    trace: list[float]
    pairs: list[tuple[int, int]]
    bound: float
    preconditions_hold: bool
    reached_bound: bool

    @property
    def final(self) -> float:
        return self.trace[-1]

    def to_dict(self) -> dict:
        return {"rho_trace": self.trace, "pairs": [list(p) for p in self.pairs],
                "bound_R": self.bound, "final_rho": self.final,
                "preconditions_hold": self.preconditions_hold,
                "reached_bound": self.reached_bound,
                "permutation": [int(v) for v in self.permutation.perm]}


def _same_class_pairs(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ls, l2s = [], []
    for c in (1, -1):
        idx = np.flatnonzero(labels == c)
        a, b = np.triu_indices(len(idx), k=1)
        ls.append(idx[a])
        l2s.append(idx[b])
    return np.concatenate(ls), np.concatenate(l2s)


def greedy_partial_corr_jam(ds: Dataset, x1: int = 0, x2: int = 1, x3: int = 2,
                            max_iter: int = 10000, epsilon: float = 0.5,
                            bound: float | None = None) -> JamResult:
    """Best block-class transposition of x3 values, repeated while rho_{(13).2} drops.

    Stops when no transposition lowers it by more than 1e-12 or once it is <= R.
    """
    if len({x1, x2, x3}) != 3:
        raise CausalError("x1, x2, x3 must be distinct")
    X, y = ds.observations, ds.labels
    m = ds.m
    R = cm_bound_R(ds, epsilon, x1, x2, x3) if bound is None else float(bound)
    a1 = X[:, x1] - X[:, x1].mean()
    a2 = X[:, x2] - X[:, x2].mean()
    n1, n2 = math.sqrt(a1 @ a1), math.sqrt(a2 @ a2)
    a3 = X[:, x3] - X[:, x3].mean()
    n3 = math.sqrt(a3 @ a3)
    if n3 == 0:
        raise CausalError("x3 is constant")
    r12 = corr(X[:, x1], X[:, x2])
    perm = np.arange(m)
    cur = a3.copy()
    s13, s23 = float(a1 @ cur), float(a2 @ cur)

    def rho_of(s13_, s23_):
        return partial_from_corrs(s13_ / (n1 * n3), r12, s23_ / (n2 * n3))

    rho = float(rho_of(s13, s23))
    trace, pairs = [rho], []
    ls, l2s = _same_class_pairs(y)
    pre = r12 ** 2 <= 1.0 - epsilon and (s23 / (n2 * n3)) ** 2 <= 1.0 - epsilon
    while len(pairs) < max_iter and rho > R:
        dv = cur[l2s] - cur[ls]
        # swapping x3 at l, l2 adds (a[l] - a[l2]) (x3[l2] - x3[l]) to each cross sum
        cand = rho_of(s13 + (a1[ls] - a1[l2s]) * dv, s23 + (a2[ls] - a2[l2s]) * dv)
        k = int(np.argmin(cand))
        if not rho - cand[k] > JAM_MIN_DECREASE:
            break
        l, l2 = int(ls[k]), int(l2s[k])
        cur[[l, l2]] = cur[[l2, l]]
        perm[[l, l2]] = perm[[l2, l]]
        s13, s23 = float(a1 @ cur), float(a2 @ cur)
        rho = float(rho_of(s13, s23))
        pre = pre and (s23 / (n2 * n3)) ** 2 <= 1.0 - epsilon
        trace.append(rho)
        pairs.append((l, l2))
    return JamResult(Permutation(perm), trace, pairs, R, bool(pre), rho <= R)


def random_blockclass_jam(ds: Dataset, seed=None, x1: int = 0, x2: int = 1, x3: int = 2
                          ) -> tuple[Permutation, float]:
    """One uniform within-class permutation of x3 and the resulting rho_{(13).2}."""
    rng = np.random.default_rng(seed)
    p = random_block_class_permutation(ds.labels, rng)
    X = np.array(ds.observations)
    X[:, x3] = X[p.perm, x3]
    return p, partial_correlation(X, x1, x3, x2)


# -- DAGs and back-door adjustment ----------------------------------------------

@dataclass(frozen=True)
class CausalDag:
    vertices: tuple[str, ...]
    latent: frozenset[str]
    arcs: tuple[tuple[str, str], ...]
    queries: tuple[tuple[str, str], ...] = ()
    _parents: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        names = tuple(self.vertices)
        if len(set(names)) != len(names):
            raise CausalError("duplicate vertex name")
        vs = set(names)
        arcs = tuple((str(a), str(b)) for a, b in self.arcs)
        for a, b in arcs:
            if a not in vs or b not in vs:
                raise CausalError(f"arc ({a}, {b}) uses an unknown vertex")
        parents = {v: set() for v in names}
        for a, b in arcs:
            parents[b].add(a)
        object.__setattr__(self, "vertices", names)
        object.__setattr__(self, "latent", frozenset(self.latent))
        object.__setattr__(self, "arcs", arcs)
        object.__setattr__(self, "_parents", parents)
        self.topological_order()
        for y, x in self.queries:
            for v in (y, x):
                if v not in vs or v in self.latent:
                    raise CausalError(f"query variable {v!r} must be an observable vertex")

    @classmethod
    def from_dict(cls, doc: dict) -> "CausalDag":
        try:
            verts = [v["name"] for v in doc["vertices"]]
            latent = {v["name"] for v in doc["vertices"] if v.get("latent", False)}
            arcs = [tuple(a) for a in doc.get("arcs", [])]
            queries = [tuple(q) for q in doc.get("queries", [])]
        except (KeyError, TypeError) as e:
            raise CausalError(f"malformed DAG document: {e}") from None
        return cls(tuple(verts), frozenset(latent), tuple(arcs), tuple(queries))

    @classmethod
    def load(cls, path) -> "CausalDag":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @property
    def observables(self) -> tuple[str, ...]:
        return tuple(v for v in self.vertices if v not in self.latent)

    def parents(self, v: str) -> set[str]:
        return set(self._parents[v])

    def children(self, v: str) -> set[str]:
        return {b for a, b in self.arcs if a == v}

    def topological_order(self) -> list[str]:
        indeg = {v: len(self._parents[v]) for v in self.vertices}
        ready = [v for v in self.vertices if indeg[v] == 0]
        out = []
        while ready:
            v = ready.pop(0)
            out.append(v)
            for c in sorted(self.children(v), key=self.vertices.index):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(out) != len(self.vertices):
            raise CausalError("graph has a directed cycle")
        return out

    def descendants(self, v: str) -> set[str]:
        seen, stack = set(), [v]
        while stack:
            for c in self.children(stack.pop()):
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        return seen

    def ancestors(self, vs) -> set[str]:
        seen, stack = set(vs), list(vs)
        while stack:
            for p in self._parents[stack.pop()]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen

    def without_outgoing(self, x: str) -> "CausalDag":
        return CausalDag(self.vertices, self.latent, tuple(a for a in self.arcs if a[0] != x))


def d_separated(dag: CausalDag, xs, ys, zs) -> bool:
    """Moralised ancestral graph test: xs and ys disconnected once zs is removed."""
    xs, ys, zs = set(xs), set(ys), set(zs)
    keep = dag.ancestors(xs | ys | zs)
    adj = {v: set() for v in keep}
    for v in keep:
        ps = [p for p in dag.parents(v) if p in keep]
        for p in ps:
            adj[v].add(p)
            adj[p].add(v)
        for p, q in itertools.combinations(ps, 2):
            adj[p].add(q)
            adj[q].add(p)
    seen = set(xs - zs)
    stack = list(seen)
    while stack:
        v = stack.pop()
        if v in ys:
            return False
        for w in adj[v]:
            if w not in seen and w not in zs:
                seen.add(w)
                stack.append(w)
    return True


@dataclass(frozen=True)
class AdjustmentSet:
    variables: frozenset[str]
    query: tuple[str, str]

    def to_list(self) -> list[str]:
        return sorted(self.variables)


def is_backdoor_set(dag: CausalDag, x: str, y: str, Z) -> bool:
    Z = set(Z)
    if x in Z or y in Z or Z & dag.latent or Z & dag.descendants(x):
        return False
    return d_separated(dag.without_outgoing(x), {x}, {y}, Z)


def backdoor_adjustments(dag: CausalDag, x: str, y: str,
                         max_size: int | None = None) -> list[AdjustmentSet]:
    """All minimal back-door sets for the effect of x on y, smallest first."""
    for v in (x, y):
        if v not in dag.vertices or v in dag.latent:
            raise CausalError(f"{v!r} is not an observable vertex")
    if len(dag.observables) > MAX_BRUTE_OBSERVABLES:
        raise CausalError(f"graph too large: more than {MAX_BRUTE_OBSERVABLES} observables")
    banned = {x, y} | dag.descendants(x)
    pool = [v for v in dag.observables if v not in banned]
    cut = dag.without_outgoing(x)
    top = len(pool) if max_size is None else min(max_size, len(pool))
    found: list[frozenset[str]] = []
    for size in range(top + 1):
        for Z in itertools.combinations(pool, size):
            Zs = frozenset(Z)
            if any(f <= Zs for f in found):
                continue
            if d_separated(cut, {x}, {y}, Zs):
                found.append(Zs)
    return [AdjustmentSet(z, (y, x)) for z in found]


# -- adjustment interference as set splitting ----------------------------------------

@dataclass
class SplitResult:
    feasible: bool
    anchor: list[str]
    shuffle: list[str]
    vsets: list[list[str]]
    mode: str
    splits_checked: int = 0
    unsatisfied: list[list[str]] = field(default_factory=list)

    def to_feature_split(self, feature_names) -> FeatureSplit:
        if not self.feasible:
            raise CausalError("no interfering split exists")
        return FeatureSplit.from_names(feature_names, self.anchor, self.shuffle)

    def to_dict(self) -> dict:
        doc = {"feasible": self.feasible, "mode": self.mode, "vsets": self.vsets}
        if self.feasible:
            doc.update(anchor=self.anchor, shuffle=self.shuffle)
        else:
            doc.update(certificate={"splits_checked": self.splits_checked,
                                    "complete": self.mode == "exhaustive",
                                    "unsatisfied_in_best": self.unsatisfied})
        return doc


def query_vsets(dag: CausalDag, adjustments=None) -> list[list[str]]:
    """x, y plus each minimal adjustment, per query; queries without adjustment add none."""
    out = []
    for y, x in dag.queries:
        sets = adjustments.get((y, x)) if adjustments else None
        if sets is None:
            sets = backdoor_adjustments(dag, x, y)
        for z in sets:
            zs = z.variables if isinstance(z, AdjustmentSet) else frozenset(z)
            vs = [x, y] + sorted(zs - {x, y})
            if vs not in out:
                out.append(vs)
    return out


def _masks(vsets, universe):
    pos = {v: i for i, v in enumerate(universe)}
    return np.array([sum(1 << pos[v] for v in vs) for vs in vsets], dtype=np.int64)


def split_vsets(vsets, universe=None, mode: str = "auto", seed=0,
                restarts: int = 10_000) -> SplitResult:
    """Two-colour ``universe`` so that every set in ``vsets`` meets both colours.

    Colour 0 is the anchor, colour 1 the shuffle side; the first listed vertex is
    pinned to the anchor. Vertices outside every set go to the anchor, except
    that the shuffle side is never left empty.
    """
    vsets = [list(dict.fromkeys(vs)) for vs in vsets]
    if not vsets:
        raise CausalError("no queries to interfere with")
    order = list(dict.fromkeys(v for vs in vsets for v in vs))
    rest = [v for v in (universe or []) if v not in order]
    n = len(order)
    if mode == "auto":
        mode = "exhaustive" if n <= MAX_EXHAUSTIVE_SPLIT else "heuristic"
    masks = _masks(vsets, order)
    full = (1 << n) - 1
    if any(len(vs) < 2 for vs in vsets):
        bad = [vs for vs in vsets if len(vs) < 2]
        return SplitResult(False, [], [], vsets, mode, 0, bad)

    def finish(code: int, checked: int) -> SplitResult:
        anchor = [v for i, v in enumerate(order) if not code >> i & 1] + rest
        shuffle = [v for i, v in enumerate(order) if code >> i & 1]
        return SplitResult(True, anchor, shuffle, vsets, mode, checked)

    if mode == "exhaustive":
        if n > MAX_EXHAUSTIVE_SPLIT:
            raise CausalError(f"exhaustive split limited to {MAX_EXHAUSTIVE_SPLIT} vertices")
        total = 1 << (n - 1)  # vertex 0 pinned to the anchor
        step = 1 << 16
        for start in range(0, total, step):
            codes = np.arange(start, min(start + step, total), dtype=np.int64) << 1
            ok = np.ones(len(codes), dtype=bool)
            for mk in masks:
                hit = codes & mk
                ok &= (hit != 0) & (hit != mk)
            if ok.any():
                k = int(np.argmax(ok))
                return finish(int(codes[k]), start + k + 1)
        return SplitResult(False, [], [], vsets, mode, total, [])

    if mode != "heuristic":
        raise CausalError("mode must be auto, exhaustive or heuristic")
    rng = np.random.default_rng(seed)
    member = [[k for k, vs in enumerate(vsets) if v in vs] for v in order]

    def bad_sets(code):
        return [k for k, mk in enumerate(masks) if (code & mk) in (0, int(mk))]

    best_bad = bad_sets(0)
    for r in range(restarts):
        code = int(rng.integers(0, 1 << (n - 1))) << 1
        bad = len(bad_sets(code))
        improved = True
        while improved and bad:
            improved = False
            for i in rng.permutation(np.arange(1, n)):
                flipped = code ^ (1 << int(i))
                nb = len(bad_sets(flipped)) if member[i] else bad
                if nb < bad:
                    code, bad, improved = flipped, nb, True
        if bad == 0:
            return finish(code & full, r + 1)
        if bad < len(best_bad):
            best_bad = bad_sets(code)
    return SplitResult(False, [], [], vsets, mode, restarts, [vsets[k] for k in best_bad])


def interfering_split(dag: CausalDag, adjustments=None, mode: str = "auto",
                      seed=0) -> SplitResult:
    """Anchor/shuffle split of the observables meeting every query's adjustment set."""
    if not dag.queries:
        raise CausalError("no queries")
    vsets = query_vsets(dag, adjustments)
    if not vsets:
        # no query is identifiable by adjustment, so every split qualifies
        obs = list(dag.observables)
        return SplitResult(True, obs[:1], obs[1:], [], mode)
    return split_vsets(vsets, list(dag.observables), mode, seed)
