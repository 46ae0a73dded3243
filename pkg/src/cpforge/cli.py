"""Command-line front end: protect-hsic, protect-odds, optimize, causal, report."""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .causal import (CausalDag, CausalError, backdoor_adjustments, cm_bound_R,
                     greedy_partial_corr_jam, interfering_split, random_blockclass_jam)
from .complexity import ComplexityError
from .cp_engine import CPError, FeatureSplit, apply_cp, is_block_class, save_permutation
from .data import (DataError, apply_scaling, dataset_from_table, permute_table, read_csv_table,
                   standardize, write_csv_table)
from .fairness import (FairnessError, Predicate, UndefinedOdds, build_odds_cp, contingency,
                       odds_ratio, shift_for_target, shift_range)
from .learn import (DEFAULT_GRID, cross_validate, save_model, train, zero_one_error)
from .search import (TRACE_COLUMNS, HsicObjective, PhiRiskObjective, SearchConfig, SearchError,
                     component_seed, crossover_learn, read_trace, write_trace)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4, 5


class Infeasible(Exception):
    def __init__(self, message: str, payload: dict | None = None):
        super().__init__(message)
        self.payload = payload or {}


class UsageError(Exception):
    pass


# -- manifest ---------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Run manifest; written before any output and rewritten on completion."""

    def __init__(self, out_dir: Path, command: str, args: argparse.Namespace, inputs):
        self.path = out_dir / "manifest.json"
        self.start = time.time()
        config = {k: v for k, v in vars(args).items() if k != "func"}
        self.doc = {
            "command": command,
            "config": config,
            "seed": getattr(args, "seed", None),
            "inputs": {str(p): _sha256(p) for p in inputs if p and Path(p).is_file()},
            "library_version": __version__,
            "status": "running",
            "outputs": [],
        }
        out_dir.mkdir(parents=True, exist_ok=True)
        self.write()

    def write(self):
        self.path.write_text(json.dumps(self.doc, indent=1, default=str) + "\n", encoding="utf-8")

    def finish(self, outputs, **extra):
        self.doc.update(status="completed", outputs=[str(o) for o in outputs],
                        wall_time_s=round(time.time() - self.start, 3), **extra)
        self.write()


def _load(args):
    table = read_csv_table(args.data)
    ds = dataset_from_table(table, args.label, args.positive, args.missing)
    return table, ds


def _split_from_args(args, ds) -> FeatureSplit:
    if args.split == "first-half":
        return FeatureSplit.first_half(ds.d)
    if not args.split_file:
        raise UsageError("--split explicit requires --split-file")
    doc = json.loads(Path(args.split_file).read_text(encoding="utf-8"))
    split = FeatureSplit.from_names(ds.feature_names, doc["anchor"], doc["shuffle"])
    split.check(ds.d)
    return split


def _dump(obj, path: Path | None):
    text = json.dumps(obj, indent=1, default=_json_default) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text, encoding="utf-8")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


# -- commands ---------------------------------------------------------------------

def cmd_protect_hsic(args) -> int:
    out = Path(args.out_dir)
    man = Manifest(out, "protect-hsic", args, [args.data, args.split_file])
    table, ds = _load(args)
    split = _split_from_args(args, ds)
    scaled, _ = standardize(ds)
    config = SearchConfig(iterations=args.iters, candidate_mode=args.candidates,
                          candidates=args.sample_size, block_class=not args.no_block_class,
                          seed=args.seed, pvalue_every=args.pvalue_every,
                          pvalue_resamples=args.resamples, track_rcp=not args.no_rcp)
    objective = HsicObjective.from_split(scaled, split)
    result = crossover_learn(scaled, split, config, objective)
    perm = result.permutation
    shuffle_names = [ds.feature_names[j] for j in split.shuffle]
    paths = [out / "permutation.json", out / "protected.csv", out / "trace.csv"]
    save_permutation(paths[0], perm, block_class=is_block_class(perm, ds.labels),
                     seed=args.seed, iterations=len(result.trace) - 1)
    write_csv_table(permute_table(table, ds, shuffle_names, perm), paths[1])
    write_trace(paths[2], result.trace)
    man.finish(paths, search=result.manifest(),
               split={"anchor": [ds.feature_names[j] for j in split.anchor],
                      "shuffle": shuffle_names})
    first, last = result.trace[0], result.trace[-1]
    print(f"hsic {first.hsic:.6g} -> {last.hsic:.6g} after {len(result.trace) - 1} iterations")
    return EXIT_OK


def _table_report(t) -> dict:
    doc = t.to_dict()
    for conv in ("counts", "probability"):
        try:
            doc[f"odds_{conv}"] = float(odds_ratio(t, conv))
        except UndefinedOdds:
            doc[f"odds_{conv}"] = None
    return doc


def cmd_protect_odds(args) -> int:
    out = Path(args.out_dir)
    man = Manifest(out, "protect-odds", args, [args.data])
    table, ds = _load(args)
    xC, xA = ds.feature_index(args.xc), ds.feature_index(args.xa)
    pi = Predicate.parse(args.predicate, ds.feature_names)
    before = contingency(ds, xC, xA, pi)
    if args.shift_i is not None:
        i = args.shift_i
        lo, hi = shift_range(before)
        if not lo <= i <= hi or (i != 0 and i == before.d):
            raise Infeasible(f"shift {i} is outside the legal range [{lo}, {hi}]",
                             {"legal_range": [lo, hi], "table": before.to_dict()})
    else:
        try:
            i, _ = shift_for_target(before, args.target_rho, args.convention)
        except FairnessError as e:
            lo, hi = shift_range(before)
            raise Infeasible(str(e), {"legal_range": [lo, hi], "table": before.to_dict()}) from None
    cp = build_odds_cp(ds, xC, xA, pi, i)
    after_ds = apply_cp(ds, cp.split, cp.permutation)
    after = contingency(after_ds, xC, xA, pi)
    report = {"shift_i": i, "delta_counts": str(cp.plan.delta),
              "before": _table_report(before), "after": _table_report(after),
              "block_class": cp.block_class,
              "learnability_guarantee": "holds" if cp.block_class else
              "void: cross-class pairing was needed"}
    paths = [out / "permutation.json", out / "protected.csv", out / "odds_report.json"]
    save_permutation(paths[0], cp.permutation, block_class=cp.block_class, seed=None,
                     iterations=abs(i), cross_class=not cp.block_class)
    write_csv_table(permute_table(table, ds, [args.xa], cp.permutation), paths[1])
    _dump(report, paths[2])
    man.finish(paths)
    _dump(report, None)
    return EXIT_OK


def _holdout_split(ds, frac: float, seed: int):
    rng = np.random.default_rng(component_seed(seed, "holdout"))
    idx = rng.permutation(ds.m)
    h = int(round(frac * ds.m))
    if h < 1 or ds.m - h < 2:
        raise DataError("holdout fraction leaves an empty train or test part")
    return ds.subset(idx[h:]), ds.subset(idx[:h])


def _grid(text: str | None):
    if not text:
        return DEFAULT_GRID
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"bad --cv-grid {text!r}") from None


def cmd_optimize(args) -> int:
    out = Path(args.out_dir)
    man = Manifest(out, "optimize", args, [args.data, args.test_data])
    _, ds = _load(args)
    if args.test_data:
        train_ds = ds
        test_ds = dataset_from_table(read_csv_table(args.test_data), args.label, args.positive,
                                     args.missing)
        if test_ds.feature_names != ds.feature_names:
            raise DataError("test file columns differ from training file")
    else:
        train_ds, test_ds = _holdout_split(ds, args.holdout, args.seed)
    train_ds, scaling = standardize(train_ds)
    test_ds = apply_scaling(test_ds, scaling)
    split = _split_from_args(args, train_ds)
    lam = cross_validate(train_ds, args.loss, _grid(args.cv_grid), args.folds,
                         seed=np.random.default_rng(component_seed(args.seed, "cv")).integers(2**32))
    base = train(train_ds, args.loss, lam)
    config = SearchConfig(iterations=args.iters, candidate_mode=args.candidates,
                          candidates=args.sample_size, block_class=not args.no_block_class,
                          retrain_every=args.retrain_every, seed=args.seed,
                          pvalue_every=args.pvalue_every, pvalue_resamples=args.resamples,
                          track_hsic=True, track_rcp=True)
    result = crossover_learn(train_ds, split, config, PhiRiskObjective(base), model=base,
                             holdout=test_ds)
    model = result.model
    paths = [out / "model.json", out / "baseline_model.json", out / "trace.csv",
             out / "permutation.json"]
    save_model(paths[0], model)
    save_model(paths[1], base)
    write_trace(paths[2], result.trace)
    save_permutation(paths[3], result.permutation,
                     block_class=is_block_class(result.permutation, train_ds.labels),
                     seed=args.seed, iterations=len(result.trace) - 1)
    summary = {"lambda": lam, "baseline_test_error": zero_one_error(base, test_ds),
               "test_error": zero_one_error(model, test_ds), "converged": model.converged}
    man.finish(paths, search=result.manifest(), summary=summary)
    _dump(summary, None)
    return EXIT_OK


def cmd_causal(args) -> int:
    out_path = Path(args.out) if args.out else None
    out_dir = out_path.parent if out_path else Path(args.out_dir)
    man = Manifest(out_dir, "causal", args, [args.dag, args.data])
    dag = CausalDag.load(args.dag)
    if args.mode == "adjustments":
        if not dag.queries:
            raise UsageError("the DAG declares no queries")
        doc = {"queries": [{"y": y, "x": x, "adjustments": [z.to_list() for z in
                                                            backdoor_adjustments(dag, x, y)]}
                           for y, x in dag.queries]}
    elif args.mode == "split":
        res = interfering_split(dag, mode=args.split_mode, seed=args.seed)
        doc = res.to_dict()
        if not res.feasible:
            _dump(doc, out_path)
            man.finish([out_path] if out_path else [], feasible=False)
            raise Infeasible("no split interferes with every query", doc)
    else:
        if not args.data:
            raise UsageError("--mode jam requires --data and --label")
        _, ds = _load(args)
        names = [args.x1, args.x2, args.x3]
        if None in names:
            obs = [v for v in dag.topological_order() if v not in dag.latent]
            names = [n or obs[k] for k, n in enumerate(names)]
        x1, x2, x3 = (ds.feature_index(n) for n in names)
        jam = greedy_partial_corr_jam(ds, x1, x2, x3, args.max_iter, args.epsilon)
        rand = [random_blockclass_jam(ds, int(s), x1, x2, x3)[1]
                for s in np.random.default_rng(component_seed(args.seed, "jam")).integers(
                    0, 2**63, size=args.random_draws)]
        R = cm_bound_R(ds, args.epsilon, x1, x2, x3)
        doc = {"variables": names, "greedy": jam.to_dict(),
               "random": {"rho": rand, "within_R_pm_0.1": float(np.mean(np.abs(
                   np.array(rand) - R) <= 0.1)) if rand else None}}
    _dump(doc, out_path)
    man.finish([out_path] if out_path else [])
    return EXIT_OK


def _aggregate(traces) -> list[dict]:
    numeric = [c for c in TRACE_COLUMNS if c not in ("iteration", "pair_l", "pair_l2")]
    n_iter = max(len(t) for t in traces)
    rows = []
    for it in range(n_iter):
        recs = [t[it] for t in traces if len(t) > it]
        row = {"iteration": it, "n": len(recs)}
        for c in numeric:
            vals = np.array([getattr(r, c) for r in recs if getattr(r, c) is not None], float)
            row[f"{c}_mean"] = float(vals.mean()) if vals.size else None
            row[f"{c}_stderr"] = (float(vals.std(ddof=1) / math.sqrt(vals.size))
                                  if vals.size > 1 else (0.0 if vals.size else None))
        rows.append(row)
    return rows


def cmd_report(args) -> int:
    traces = [read_trace(p) for p in args.trace]
    if len(traces) == 1:
        rows = [asdict(r) for r in traces[0]]
        columns = list(TRACE_COLUMNS)
    else:
        rows = _aggregate(traces)
        columns = list(rows[0].keys())
    out = Path(args.out) if args.out else None
    if args.format == "json":
        _dump(rows, out)
        return EXIT_OK
    if len(traces) == 1:
        from .search import trace_to_csv
        text = trace_to_csv(traces[0])
    else:
        lines = [",".join(columns)]
        for r in rows:
            lines.append(",".join("" if r[c] is None else repr(r[c]) if isinstance(r[c], float)
                                  else str(r[c]) for c in columns))
        text = "\n".join(lines) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def _data_args(p, required=True):
    p.add_argument("--data", required=required, help="input CSV with a header row")
    p.add_argument("--label", required=required, help="name of the binary label column")
    p.add_argument("--positive", default="1", help="label value of the positive class")
    p.add_argument("--missing", choices=("zero", "error"), default="error")


def _search_args(p):
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("first-half", "explicit"), default="first-half")
    p.add_argument("--split-file", help="JSON {anchor: [...], shuffle: [...]} of feature names")
    p.add_argument("--candidates", choices=("auto", "exhaustive", "sampled"), default="auto")
    p.add_argument("--sample-size", type=int, default=4096)
    p.add_argument("--no-block-class", action="store_true")
    p.add_argument("--pvalue-every", type=int, default=10)
    p.add_argument("--resamples", type=int, default=999)
    p.add_argument("--out-dir", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cpforge", description=__doc__)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("protect-hsic", help="shuffle to lower HSIC between anchor and shuffle sets")
    _data_args(p)
    _search_args(p)
    p.add_argument("--no-rcp", action="store_true", help="skip the per-iteration RCP bound")
    p.set_defaults(func=cmd_protect_hsic)

    p = sub.add_parser("protect-odds", help="shift an odds ratio with an exact crossover")
    _data_args(p)
    p.add_argument("--xc", required=True)
    p.add_argument("--xa", required=True)
    p.add_argument("--predicate", default="", help="e.g. 'f1=1,f2=0'; empty means TRUE")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--target-rho", type=float)
    g.add_argument("--shift-i", type=int)
    p.add_argument("--convention", choices=("counts", "probability"), default="counts")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_protect_odds)

    p = sub.add_parser("optimize", help="crossover learning on the phi-risk")
    _data_args(p)
    _search_args(p)
    p.add_argument("--loss", choices=("logistic", "square"), default="logistic")
    p.add_argument("--cv-grid", help="comma-separated lambdas (default 1e-5..1e4)")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--retrain-every", type=int, default=0)
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--test-data", help="explicit test CSV instead of a holdout split")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("causal", help="back-door adjustments, interfering splits, jamming")
    p.add_argument("--dag", required=True)
    p.add_argument("--mode", choices=("adjustments", "split", "jam"), required=True)
    p.add_argument("--split-mode", choices=("auto", "exhaustive", "heuristic"), default="auto")
    _data_args(p, required=False)
    p.add_argument("--x1")
    p.add_argument("--x2")
    p.add_argument("--x3")
    p.add_argument("--epsilon", type=float, default=0.5)
    p.add_argument("--max-iter", type=int, default=10000)
    p.add_argument("--random-draws", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output JSON file (default stdout)")
    p.add_argument("--out-dir", default=".", help="where the manifest goes when --out is unset")
    p.set_defaults(func=cmd_causal)

    p = sub.add_parser("report", help="re-emit or aggregate trace CSVs")
    p.add_argument("--trace", nargs="+", required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Infeasible as e:
        print(f"infeasible: {e}", file=sys.stderr)
        if e.payload:
            print(json.dumps(e.payload, indent=1, default=_json_default), file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except SearchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC if "evaluation failed" in str(e) else EXIT_DATA
    except (DataError, CPError, FairnessError, CausalError, ComplexityError,
            OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
