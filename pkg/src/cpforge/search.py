"""Crossover learning: greedy composition of transpositions under a pluggable objective."""
from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .complexity import rcp_report
from .cp_engine import FeatureSplit, Permutation, cycle_stats
from .data import Dataset
from .fairness import Predicate, UndefinedOdds, odds_ratio, ContingencyTable
from .kernels_hsic import gaussian_kernel, hsic, hsic_deltas, permutation_test
from .learn import LinearModel, fit_arrays, phi

EXHAUSTIVE_LIMIT = 500
TRACE_COLUMNS = ("iteration", "objective", "hsic", "p_value", "phi_risk", "test_error",
                 "rcp_bound", "odd_cycles", "fixed_points", "pair_l", "pair_l2")


class SearchError(RuntimeError):
    pass


def component_seed(seed: int, name: str) -> np.random.SeedSequence:
    """Independent stream for one named component of a run."""
    return np.random.SeedSequence([int(seed) & (2**64 - 1), zlib.crc32(name.encode())])


@dataclass(frozen=True)
class SearchConfig:
    iterations: int = 100
    candidate_mode: str = "auto"
    candidates: int = 4096
    block_class: bool = True
    retrain_every: int = 0
    early_stop_patience: int = 10
    seed: int = 0
    pvalue_every: int = 10
    pvalue_resamples: int = 999
    r_s: float = 1.0
    track_hsic: bool = True
    track_rcp: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.candidates < 1:
            raise ValueError("candidates must be >= 1")
        if self.candidate_mode not in ("auto", "exhaustive", "sampled"):
            raise ValueError("candidate_mode must be auto, exhaustive or sampled")

    def mode_for(self, m: int) -> str:
        if self.candidate_mode != "auto":
            return self.candidate_mode
        return "exhaustive" if m <= EXHAUSTIVE_LIMIT else "sampled"


class SearchState:
    """Current permutation and the observation matrix it induces."""

    def __init__(self, ds: Dataset, split: FeatureSplit):
        split.check(ds.d)
        self.ds = ds
        self.split = split
        self.shuffle_cols = list(split.shuffle)
        self.perm = np.arange(ds.m)
        self.X = np.array(ds.observations)

    @property
    def m(self) -> int:
        return self.ds.m

    @property
    def labels(self) -> np.ndarray:
        return self.ds.labels

    def swap(self, l: int, l2: int) -> None:
        self.perm[[l, l2]] = self.perm[[l2, l]]
        c = self.shuffle_cols
        self.X[np.ix_([l, l2], c)] = self.X[np.ix_([l2, l], c)]

    def dataset(self) -> Dataset:
        return self.ds.with_observations(self.X)

    def permutation(self) -> Permutation:
        return Permutation(self.perm)


# -- objectives ---------------------------------------------------------------------

class Objective:
    kind = "abstract"

    def bind(self, state: SearchState) -> None:
        pass

    def value(self, state: SearchState) -> float:
        raise NotImplementedError

    def deltas(self, state: SearchState, ls: np.ndarray, l2s: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def before_swap(self, state: SearchState, l: int, l2: int) -> None:
        pass

    def set_model(self, model: LinearModel) -> None:
        pass

    def describe(self) -> dict:
        return {"kind": self.kind}


class HsicObjective(Objective):
    """HSIC between a fixed kernel Ku and the shuffled kernel M Kv M'."""

    kind = "hsic_reduce"

    def __init__(self, Ku, Kv):
        self.Ku = np.asarray(getattr(Ku, "mat", Ku), dtype=float)
        self.Kv0 = np.asarray(getattr(Kv, "mat", Kv), dtype=float)

    @classmethod
    def from_split(cls, ds: Dataset, split: FeatureSplit, u=None, v=None) -> "HsicObjective":
        return cls(gaussian_kernel(ds, u or split.anchor), gaussian_kernel(ds, v or split.shuffle))

    def bind(self, state):
        if self.Ku.shape != (state.m, state.m) or self.Kv0.shape != (state.m, state.m):
            raise SearchError("kernel size does not match the dataset")
        B = self.Kv0[np.ix_(state.perm, state.perm)]
        self.B = B
        self.AB = self.Ku @ B

    def value(self, state):
        return hsic(self.Ku, self.B)

    def deltas(self, state, ls, l2s):
        return hsic_deltas(self.Ku, self.B, ls, l2s, self.AB)

    def before_swap(self, state, l, l2):
        B, AB = self.B, self.AB
        AB += np.outer(self.Ku[:, l2] - self.Ku[:, l], B[l] - B[l2])
        AB[:, [l, l2]] = AB[:, [l2, l]]
        B[[l, l2]] = B[[l2, l]]
        B[:, [l, l2]] = B[:, [l2, l]]

    def current_kernel(self) -> np.ndarray:
        return self.B


class PhiRiskObjective(Objective):
    """Regularised empirical phi-risk of the current linear model on the shuffled sample.

    The penalty lam |theta|^2 does not depend on the permutation, so deltas are
    pure risk changes; keeping it in the value makes retraining steps monotone too.
    """

    kind = "phi_risk"

    def __init__(self, model: LinearModel, loss_kind: str | None = None):
        self.model = model
        self.loss_kind = loss_kind or model.loss_kind

    def set_model(self, model):
        self.model = model

    def _parts(self, state):
        w = self.model.weights
        cols = state.shuffle_cols
        anchor = list(state.split.anchor)
        a = state.X[:, anchor] @ w[anchor] + self.model.intercept
        s = state.X[:, cols] @ w[cols]
        return a, s

    def value(self, state):
        a, s = self._parts(state)
        w = self.model.weights
        return float(np.mean(phi(state.labels * (a + s), self.loss_kind))
                     + self.model.lam * float(w @ w))

    def deltas(self, state, ls, l2s):
        a, s = self._parts(state)
        y = state.labels
        old = phi(y[ls] * (a[ls] + s[ls]), self.loss_kind) + phi(y[l2s] * (a[l2s] + s[l2s]),
                                                                  self.loss_kind)
        new = phi(y[ls] * (a[ls] + s[l2s]), self.loss_kind) + phi(y[l2s] * (a[l2s] + s[ls]),
                                                                   self.loss_kind)
        return (new - old) / state.m

    def describe(self):
        return {"kind": self.kind, "loss": self.loss_kind}


class OddsObjective(Objective):
    """|odds ratio - target| for the table of (x_C, x_A) under a predicate."""

    kind = "odds_target"

    def __init__(self, xC: int, xA: int, pi: Predicate, target, convention: str = "counts"):
        self.xC, self.xA, self.pi = xC, xA, pi
        self.target = Fraction(target).limit_denominator(10**12)
        self.convention = convention

    def bind(self, state):
        if self.xA not in state.shuffle_cols:
            raise SearchError("x_A must be in the shuffle set")
        if self.xC in state.shuffle_cols or self.pi.features & set(state.shuffle_cols):
            raise SearchError("x_C and predicate features must be in the anchor set")

    def _cells(self, state):
        X = state.X
        inside = self.pi.holds(X)
        return inside, X[:, self.xA].astype(int), X[:, self.xC].astype(int)

    def _score(self, a, b, c, d):
        try:
            rho = odds_ratio(ContingencyTable(a, b, c, d), self.convention)
        except UndefinedOdds:
            return math.inf
        return float(abs(rho - self.target))

    def _table(self, state):
        inside, A, C = self._cells(state)
        t = [int(np.sum(inside & (A == va) & (C == vc))) for va in (0, 1) for vc in (0, 1)]
        return t  # a, b, c, d

    def value(self, state):
        return self._score(*self._table(state))

    def deltas(self, state, ls, l2s):
        inside, A, C = self._cells(state)
        base = self._table(state)
        v0 = self._score(*base)
        out = np.zeros(len(ls))
        moved = (A[ls] != A[l2s]) & (inside[ls] | inside[l2s])
        for k in np.flatnonzero(moved):
            t = list(base)
            for r, new_a in ((ls[k], A[l2s[k]]), (l2s[k], A[ls[k]])):
                if inside[r]:
                    t[2 * A[r] + C[r]] -= 1
                    t[2 * new_a + C[r]] += 1
            v = self._score(*t)
            out[k] = v - v0 if math.isfinite(v) and math.isfinite(v0) else (
                0.0 if v == v0 else (-math.inf if not math.isfinite(v0) else math.inf))
        return out

    def describe(self):
        return {"kind": self.kind, "xC": self.xC, "xA": self.xA, "target": float(self.target),
                "convention": self.convention, "predicate": [list(t) for t in self.pi.terms]}


class PartialCorrObjective(Objective):
    """rho_{(jk).l} on the shuffled sample."""

    kind = "partial_corr"

    def __init__(self, j: int, k: int, l: int):
        if len({j, k, l}) != 3:
            raise SearchError("partial correlation needs three distinct features")
        self.j, self.k, self.l = j, k, l

    def bind(self, state):
        X = state.X
        self.c = {q: X[:, q] - X[:, q].mean() for q in (self.j, self.k, self.l)}
        self.n = {q: math.sqrt(float(v @ v)) for q, v in self.c.items()}
        if min(self.n.values()) == 0:
            raise SearchError("constant column in partial correlation")
        self.shuffled = {q: q in state.shuffle_cols for q in self.c}

    def _sums(self, state):
        cols = {q: state.X[:, q] - state.X[:, q].mean() for q in self.c}
        return cols, {pq: float(cols[pq[0]] @ cols[pq[1]])
                      for pq in ((self.j, self.k), (self.j, self.l), (self.k, self.l))}

    def _rho(self, s):
        n = self.n
        r_jk = s[(self.j, self.k)] / (n[self.j] * n[self.k])
        r_jl = s[(self.j, self.l)] / (n[self.j] * n[self.l])
        r_kl = s[(self.k, self.l)] / (n[self.k] * n[self.l])
        return (r_jk - r_jl * r_kl) / np.sqrt((1 - r_jl ** 2) * (1 - r_kl ** 2))

    def value(self, state):
        return float(self._rho(self._sums(state)[1]))

    def deltas(self, state, ls, l2s):
        cols, s = self._sums(state)
        new = {}
        for (p, q), v in s.items():
            if self.shuffled[p] == self.shuffled[q]:
                new[(p, q)] = np.full(len(ls), v)
            else:
                a, b = (cols[p], cols[q]) if not self.shuffled[p] else (cols[q], cols[p])
                new[(p, q)] = v + (a[ls] - a[l2s]) * (b[l2s] - b[ls])
        return self._rho(new) - self._rho(s)

    def describe(self):
        return {"kind": self.kind, "j": self.j, "k": self.k, "l": self.l}


# -- candidates ---------------------------------------------------------------------

def exhaustive_pairs(labels: np.ndarray, block_class: bool) -> tuple[np.ndarray, np.ndarray]:
    """All eligible (l, l2), l < l2, in lexicographic order."""
    labels = np.asarray(labels)
    m = len(labels)
    if not block_class:
        a, b = np.triu_indices(m, k=1)
        return a, b
    ls, l2s = [], []
    for c in (1, -1):  # positives come first, so the concatenation stays sorted
        idx = np.flatnonzero(labels == c)
        a, b = np.triu_indices(len(idx), k=1)
        ls.append(idx[a])
        l2s.append(idx[b])
    return np.concatenate(ls), np.concatenate(l2s)


def sampled_pairs(labels: np.ndarray, block_class: bool, count: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``count`` distinct uniform eligible pairs, sorted lexicographically."""
    labels = np.asarray(labels)
    m = len(labels)
    groups = [np.flatnonzero(labels == c) for c in (1, -1)] if block_class else [np.arange(m)]
    sizes = np.array([len(g) * (len(g) - 1) // 2 for g in groups], dtype=float)
    total = int(sizes.sum())
    if total == 0:
        return np.array([], dtype=int), np.array([], dtype=int)
    if count >= total:
        return exhaustive_pairs(labels, block_class)
    chosen: set[tuple[int, int]] = set()
    while len(chosen) < count:
        need = count - len(chosen)
        g = rng.choice(len(groups), size=need, p=sizes / sizes.sum())
        for gi in g:
            idx = groups[gi]
            i, j = rng.choice(len(idx), size=2, replace=False)
            a, b = sorted((int(idx[i]), int(idx[j])))
            chosen.add((a, b))
            if len(chosen) == count:
                break
    pairs = sorted(chosen)
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


def candidate_pairs(ds: Dataset, config: SearchConfig, rng: np.random.Generator | None = None):
    """Eligible transpositions for one search round."""
    if config.mode_for(ds.m) == "exhaustive":
        ls, l2s = exhaustive_pairs(ds.labels, config.block_class)
    else:
        rng = rng if rng is not None else np.random.default_rng(component_seed(config.seed, "candidates"))
        ls, l2s = sampled_pairs(ds.labels, config.block_class, config.candidates, rng)
    return zip(ls.tolist(), l2s.tolist())


def evaluate_candidate(objective: Objective, state: SearchState, pair) -> float:
    l, l2 = pair
    return float(objective.deltas(state, np.array([l]), np.array([l2]))[0])


# -- trace ------------------------------------------------------------------------

@dataclass
class TraceRecord:
    iteration: int
    objective: float
    hsic: float | None = None
    p_value: float | None = None
    phi_risk: float | None = None
    test_error: float | None = None
    rcp_bound: float | None = None
    odd_cycles: int = 0
    fixed_points: int = 0
    pair_l: int | None = None
    pair_l2: int | None = None

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in TRACE_COLUMNS]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def trace_to_csv(trace: list[TraceRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace:
        w.writerow(r.row())
    return buf.getvalue()


def write_trace(path, trace: list[TraceRecord]) -> None:
    Path(path).write_text(trace_to_csv(trace), encoding="utf-8")


def read_trace(path) -> list[TraceRecord]:
    """Parse a trace CSV; raises SearchError on malformed input."""
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != TRACE_COLUMNS:
        raise SearchError(f"{path}: header does not match the trace format")
    out = []
    ints = {"iteration", "odd_cycles", "fixed_points", "pair_l", "pair_l2"}
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(TRACE_COLUMNS):
            raise SearchError(f"{path}:{n}: expected {len(TRACE_COLUMNS)} fields")
        vals = {}
        for col, cell in zip(TRACE_COLUMNS, row):
            if cell == "":
                if col in ("iteration", "objective", "odd_cycles", "fixed_points"):
                    raise SearchError(f"{path}:{n}: column {col} may not be empty")
                vals[col] = None
                continue
            try:
                vals[col] = int(cell) if col in ints else float(cell)
            except ValueError:
                raise SearchError(f"{path}:{n}: bad value {cell!r} in column {col}") from None
        out.append(TraceRecord(**vals))
    if [r.iteration for r in out] != list(range(len(out))):
        raise SearchError(f"{path}: iterations must run 0, 1, 2, ...")
    return out


# -- the search ---------------------------------------------------------------------

@dataclass
class SearchResult:
    permutation: Permutation
    model: LinearModel | None
    trace: list[TraceRecord]
    accepted_delta_sum: float
    stopped_early: bool
    config: SearchConfig
    objective: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        return {"config": asdict(self.config), "objective": self.objective,
                "acceptance": "strict improvement", "tie_break": "lowest (l, l2)",
                "iterations_run": len(self.trace) - 1, "stopped_early": self.stopped_early}


def crossover_learn(ds: Dataset, split: FeatureSplit, config: SearchConfig,
                    objective: Objective, model: LinearModel | None = None,
                    holdout: Dataset | None = None,
                    secondary: HsicObjective | None = None) -> SearchResult:
    """Greedy transpositions composed onto the current permutation.

    Each round scores every candidate, takes the lowest delta (ties: lowest
    (l, l2)) and accepts it only if it strictly lowers the objective. With
    ``retrain_every = k > 0`` the model is refit on the shuffled sample every k
    accepted rounds and once more at the end.
    """
    state = SearchState(ds, split)
    objective.bind(state)
    if model is not None:
        objective.set_model(model)
    if config.retrain_every and model is None:
        raise SearchError("retraining needs an initial model")
    tracker = objective if isinstance(objective, HsicObjective) else secondary
    if tracker is None and config.track_hsic:
        tracker = HsicObjective.from_split(ds, split)
    if tracker is not None and tracker is not objective:
        tracker.bind(state)
    mode = config.mode_for(ds.m)
    cand_rng = np.random.default_rng(component_seed(config.seed, "candidates"))
    pval_seq = component_seed(config.seed, "pvalue")
    if mode == "exhaustive":
        all_pairs = exhaustive_pairs(ds.labels, config.block_class)

    def record(t, pair):
        val = objective.value(state)
        rec = TraceRecord(t, val, pair_l=pair[0] if pair else None,
                          pair_l2=pair[1] if pair else None)
        if tracker is not None:
            rec.hsic = hsic(tracker.Ku, tracker.B)
            if config.pvalue_every and t % config.pvalue_every == 0:
                seed = np.random.default_rng(pval_seq.spawn(t + 1)[-1])
                rec.p_value = permutation_test(tracker.Ku, tracker.B, config.pvalue_resamples,
                                               seed).p_value
        if model is not None:
            cur = state.dataset()
            z = cur.labels * current_model.decision(cur.observations)
            rec.phi_risk = float(np.mean(phi(z, current_model.loss_kind)))
            if holdout is not None:
                rec.test_error = float(np.mean(holdout.labels
                                               * current_model.decision(holdout.observations) <= 0))
        if config.track_rcp:
            rec.rcp_bound = rcp_report(ds, split, Permutation(state.perm), config.r_s).bound_linear
        cs = cycle_stats(state.perm)
        rec.odd_cycles, rec.fixed_points = cs.odd_cycles, cs.fixed_points
        return rec

    current_model = model

    def retrain():
        nonlocal current_model
        # warm start: descent from the previous weights cannot raise the objective
        current_model = fit_arrays(state.X, state.labels, current_model.loss_kind,
                                   current_model.lam, w0=current_model.weights,
                                   b0=current_model.intercept)
        objective.set_model(current_model)

    trace = [record(0, None)]
    delta_sum = 0.0
    stopped = False
    misses = 0
    accepted = 0
    for t in range(1, config.iterations + 1):
        if mode == "exhaustive":
            ls, l2s = all_pairs
        else:
            ls, l2s = sampled_pairs(ds.labels, config.block_class, config.candidates, cand_rng)
        pair = None
        if len(ls):
            try:
                deltas = objective.deltas(state, ls, l2s)
            except (FloatingPointError, ValueError) as e:
                raise SearchError(f"objective evaluation failed at iteration {t}: {e}") from e
            deltas = np.where(np.isnan(deltas), np.inf, deltas)
            k = int(np.argmin(deltas))
            cur = objective.value(state)
            if deltas[k] < -1e-12 * max(1.0, abs(cur)) if math.isfinite(cur) else deltas[k] < 0:
                pair = (int(ls[k]), int(l2s[k]))
                if math.isfinite(deltas[k]):
                    delta_sum += float(deltas[k])
                objective.before_swap(state, *pair)
                if tracker is not None and tracker is not objective:
                    tracker.before_swap(state, *pair)
                state.swap(*pair)
                accepted += 1
                if config.retrain_every and accepted % config.retrain_every == 0:
                    retrain()
        if pair is None:
            misses += 1
            if mode == "exhaustive" or misses >= config.early_stop_patience:
                stopped = True
                break
            trace.append(record(t, None))
            continue
        misses = 0
        trace.append(record(t, pair))
    if config.retrain_every and accepted % config.retrain_every != 0:
        retrain()
    return SearchResult(Permutation(state.perm), current_model, trace, delta_sum, stopped,
                        config, objective.describe())
