"""Command-line entry point.

Subcommands: simulate, fit, predict, benchmark, cv-leaves, gap-scaling,
crosstab.  All randomness flows from --seed, every output is plain CSV or
text, and identical invocations produce byte-identical files.  Exit codes:
0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import data as dt
from .errors import DataError, GtimmError, NumericalError
from .evaluate import benchmark, crosstab_regions, gap_experiment
from .fit import FitConfig, fit_gtimm, predict
from .mixedmodel import GtimmModel
from .modelio import ModelFile, load_model, save_model
from .tree import assign_regions, cv_leaf_scores

_CONFIG_KEYS = {
    "learning_rate": float,
    "batch_size": int,
    "max_epochs": int,
    "rel_tol": float,
    "blup_refresh_every": int,
    "max_leaves": str,
    "cv_folds": int,
    "cv_candidates": str,
    "min_region_fraction": float,
    "min_leaf": int,
    "family": str,
}


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this tool uses 1.  Help output
    shows every flag's default."""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("formatter_class", argparse.ArgumentDefaultsHelpFormatter)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fmt(value) -> str:
    if isinstance(value, float) or isinstance(value, np.floating):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _parse_candidates(spec: str):
    out = []
    for part in spec.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ValueError(f"no leaf candidates in {spec!r}")
    return tuple(out)


def _read_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{i}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "seed":
                values[key] = int(value)
                continue
            if key not in _CONFIG_KEYS:
                raise DataError(f"{path}:{i}: unknown config key {key!r}")
            values[key] = _CONFIG_KEYS[key](value)
    return values


def _seed_of(args) -> int:
    return getattr(args, "seed", 0)


def _build_fit_config(args) -> FitConfig:
    """Defaults < config file < explicit flags (flags win)."""
    values: dict = {}
    if args.config is not None:
        values.update(_read_config_file(args.config))
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if isinstance(values.get("max_leaves"), str) and values["max_leaves"] != "cv":
        values["max_leaves"] = int(values["max_leaves"])
    if isinstance(values.get("cv_candidates"), str):
        values["cv_candidates"] = _parse_candidates(values["cv_candidates"])
    explicit = getattr(args, "seed", None)
    values["seed"] = explicit if explicit is not None else values.get("seed", 0)
    return FitConfig(**values)


def _schema_from_args(args) -> dt.CsvSchema:
    x_cols = tuple(c.strip() for c in args.x_cols.split(",") if c.strip())
    if args.z_cols:
        z_cols = tuple(c.strip() for c in args.z_cols.split(",") if c.strip())
        return dt.CsvSchema(args.y_col, x_cols, z_cols=z_cols)
    return dt.CsvSchema(args.y_col, x_cols, group_col=args.group_col)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    out = _out_dir(args)
    d, truth = dt.simulate_gtimm(args.n, _seed_of(args), args.sigma_b2, args.sigma_eps2,
                                 args.groups)
    rows = [
        (d.y[i], d.X[i, 1], d.X[i, 2], d.group_label[i], truth.region_true[i])
        for i in range(d.n)
    ]
    _write_csv(out / "sim.csv", ["y", "x1", "x2", "group", "region_true"], rows)
    truth_rows = []
    p, m = truth.beta_star_true.shape
    for i in range(p):
        for j in range(m):
            truth_rows.append(("beta_star", i, j + 1, truth.beta_star_true[i, j]))
    for g, b in enumerate(truth.b_true, start=1):
        truth_rows.append(("b_true", g, 0, b))
    truth_rows.append(("sigma_b2", 0, 0, truth.sigma_b2))
    truth_rows.append(("sigma_eps2", 0, 0, truth.sigma_eps2))
    _write_csv(out / "sim_truth.csv", ["name", "i", "j", "value"], truth_rows)
    _say(args, f"wrote {out / 'sim.csv'} ({d.n} rows) and {out / 'sim_truth.csv'}")
    return 0


def cmd_fit(args) -> int:
    out = _out_dir(args)
    schema = _schema_from_args(args)
    d = dt.load_csv(args.data, schema)
    std = None
    if args.standardize:
        d, std = dt.standardize(d)
    cfg = _build_fit_config(args)
    model = fit_gtimm(d, cfg)
    save_model(out / "model.txt", model, y_col=schema.y_col, x_cols=schema.x_cols,
               group_col=schema.group_col, z_cols=schema.z_cols,
               group_names=d.group_names, standardization=std)
    _write_csv(out / "train_log.csv",
               ["epoch", "quasi_loglik", "sigma_b2", "sigma_eps2"],
               [(h.epoch, h.quasi_loglik, h.sigma_b2, h.sigma_eps2)
                for h in model.history])
    how = (f"selected by {cfg.cv_folds}-fold cross-validation"
           if cfg.max_leaves == "cv" else "fixed by --max-leaves")
    _say(args, f"fit with {model.tree.leaf_count} leaves ({how}); "
               f"wrote {out / 'model.txt'} and {out / 'train_log.csv'}")
    if args.emit_regions:
        path = emit_plotdata("regions", out, data_path=args.data, model=model,
                             schema=schema, standardization=std)
        _say(args, f"wrote {path}")
    return 0


def _build_design_for_model(mf: ModelFile, args):
    """X, Z, and raw rows for a prediction CSV, per the model's stored schema."""
    y_col = args.y_col or mf.y_col
    x_cols = tuple(args.x_cols.split(",")) if args.x_cols else mf.x_cols
    group_col = args.group_col or mf.group_col
    if x_cols is None:
        raise DataError("model file stores no x_cols; pass --x-cols")
    header, rows = dt.read_table(args.data)
    pos = {name: i for i, name in enumerate(header)}
    for name in x_cols:
        if name not in pos:
            raise DataError(f"column '{name}' not in {args.data}")
    n = len(rows)
    X = np.ones((n, 1 + len(x_cols)))
    for i, row in enumerate(rows):
        for j, name in enumerate(x_cols):
            X[i, 1 + j] = dt._parse_cell(row[pos[name]], i + 1, name)
    if mf.standardization is not None:
        X[:, 1:] = (X[:, 1:] - mf.standardization.x_mean) / mf.standardization.x_sd
    Z = None
    if mf.group_names and group_col and group_col in pos:
        q = len(mf.group_names)
        col = {name: j for j, name in enumerate(mf.group_names)}
        Z = np.zeros((n, q))
        for i, row in enumerate(rows):
            j = col.get(row[pos[group_col]].strip())
            if j is not None:
                Z[i, j] = 1.0
    elif mf.z_cols and all(c in pos for c in mf.z_cols):
        Z = np.empty((n, len(mf.z_cols)))
        for i, row in enumerate(rows):
            for j, name in enumerate(mf.z_cols):
                Z[i, j] = dt._parse_cell(row[pos[name]], i + 1, name)
    return X, Z, y_col, pos, rows


def cmd_predict(args) -> int:
    out = _out_dir(args)
    mf = load_model(args.model)
    X, Z, _, _, _ = _build_design_for_model(mf, args)
    if mf.kind == "gtimm":
        if args.include_random and Z is None:
            Z = np.zeros((X.shape[0], mf.model.b_hat.shape[0]))
        pred = predict(mf.model, X, Z, include_random=args.include_random)
    else:
        from .baselines import predict_baseline

        needs_z = mf.kind == "lmm" and args.include_random
        if needs_z and Z is None:
            Z = np.zeros((X.shape[0], mf.model.b_tilde.shape[0]))
        pred = predict_baseline(mf.model, X, Z, include_random=args.include_random)
    if mf.standardization is not None:
        pred = dt.destandardize_y(pred, mf.standardization)
    _write_csv(out / "pred.csv", ["prediction"], [(v,) for v in pred])
    _say(args, f"wrote {out / 'pred.csv'} ({len(pred)} rows)")
    return 0


def cmd_benchmark(args) -> int:
    out = _out_dir(args)
    d = dt.load_csv(args.data, _schema_from_args(args))
    if args.standardize:
        d, _ = dt.standardize(d)
    cfg = _build_fit_config(args)
    report = benchmark(d, cfg, args.train_fraction, cfg.seed)
    _write_csv(out / "benchmark.csv", ["model", "mspe"],
               [(name, value) for name, value in report.mspe.items()])
    _say(args, "test MSPE: " + "  ".join(f"{k}={v:.4f}" for k, v in report.mspe.items()))
    return 0


def cmd_cv_leaves(args) -> int:
    out = _out_dir(args)
    d = dt.load_csv(args.data, _schema_from_args(args))
    if args.standardize:
        d, _ = dt.standardize(d)
    candidates = _parse_candidates(args.candidates)
    scores = cv_leaf_scores(d, args.folds, candidates, _seed_of(args), args.min_leaf or 10)
    means = {m: float(v.mean()) for m, v in scores.items()}
    best = min(means, key=lambda m: (means[m], m))
    se = float(scores[best].std(ddof=1) / np.sqrt(args.folds))
    chosen = min(m for m in means if means[m] <= means[best] + se)
    _write_csv(out / "cv_leaves.csv", ["candidate", "mean_oof_mse"],
               [(m, means[m]) for m in sorted(means)])
    _say(args, f"wrote {out / 'cv_leaves.csv'}; candidate scores {sorted(means)}")
    print(chosen)
    return 0


def cmd_gap_scaling(args) -> int:
    out = _out_dir(args)
    n_grid = [int(v) for v in args.n_grid.split(",")]
    curve = gap_experiment(n_grid, args.m, args.replications, _seed_of(args),
                           test_n=args.test_n)
    emit_plotdata("gap", out, curve=curve)
    _say(args, f"wrote {out / 'gap.csv'}")
    return 0


def cmd_crosstab(args) -> int:
    out = _out_dir(args)
    mf = load_model(args.model)
    if mf.kind == "gtimm":
        tree = mf.model.tree
    elif mf.kind == "tree":
        tree = mf.model
    else:
        raise DataError(f"crosstab needs a tree-bearing model, got kind={mf.kind}")
    X, Z, _, pos, rows = _build_design_for_model(mf, args)
    group_col = args.group_col or mf.group_col
    if not group_col or group_col not in pos:
        raise DataError("crosstab needs a group column")
    groups = np.array([row[pos[group_col]].strip() for row in rows])
    assign = assign_regions(tree, X)
    counts = crosstab_regions(assign, groups)
    labels = sorted(set(groups.tolist()))
    emit_plotdata("crosstab", out, counts=counts, labels=labels)
    _say(args, f"wrote {out / 'crosstab.csv'}")
    return 0


def emit_plotdata(kind: str, out_dir: Path, **inputs) -> Path:
    """Write tidy CSVs for external plotting; no rendering happens here."""
    out_dir = Path(out_dir)
    if kind == "regions":
        schema = inputs["schema"]
        model: GtimmModel = inputs["model"]
        header, rows = dt.read_table(inputs["data_path"])
        pos = {name: i for i, name in enumerate(header)}
        if "region_true" not in pos:
            raise DataError("regions plot data needs a region_true column")
        n = len(rows)
        X = np.ones((n, 1 + len(schema.x_cols)))
        for i, row in enumerate(rows):
            for j, name in enumerate(schema.x_cols):
                X[i, 1 + j] = dt._parse_cell(row[pos[name]], i + 1, name)
        raw_x = X[:, 1:].copy()
        std = inputs.get("standardization")
        if std is not None:
            X[:, 1:] = (X[:, 1:] - std.x_mean) / std.x_sd
        region_tree = model.tree.route(X)
        region_true = [int(float(row[pos["region_true"]])) for row in rows]
        path = out_dir / "regions.csv"
        _write_csv(path, ["x1", "x2", "region_true", "region_tree"],
                   [(raw_x[i, 0], raw_x[i, 1], region_true[i], region_tree[i])
                    for i in range(n)])
        return path
    if kind == "gap":
        curve = inputs["curve"]
        path = out_dir / "gap.csv"
        _write_csv(path, ["N", "M", "gap_mean", "gap_std"],
                   [(n, curve.m, gm, gs) for n, gm, gs in
                    zip(curve.n_values, curve.gap_mean, curve.gap_std)])
        return path
    if kind == "crosstab":
        counts = inputs["counts"]
        labels = inputs["labels"]
        path = out_dir / "crosstab.csv"
        rows = [(node + 1, labels[g], int(counts[node, g]))
                for node in range(counts.shape[0]) for g in range(len(labels))]
        _write_csv(path, ["node", "group", "count"], rows)
        return path
    raise ValueError(f"unknown plot-data kind {kind!r}")


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------


def _add_common(sp) -> None:
    sp.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                    help="RNG seed (default: 0; a config-file seed applies "
                         "when this flag is absent)")
    sp.add_argument("--config", default=None, help="key=value config file")
    sp.add_argument("--out", default=".", help="output directory (default .)")
    sp.add_argument("--quiet", action="store_true", help="suppress progress output")


def _add_schema(sp) -> None:
    sp.add_argument("--data", required=True, help="input CSV with a header row")
    sp.add_argument("--y-col", default="y", help="response column (default y)")
    sp.add_argument("--x-cols", default="x1,x2",
                    help="comma-separated predictor columns (default x1,x2)")
    sp.add_argument("--group-col", default="group",
                    help="group column for the random effect (default group)")
    sp.add_argument("--z-cols", default=None,
                    help="explicit random-effect columns instead of --group-col")
    sp.add_argument("--standardize", action="store_true",
                    help="standardize y and predictors before fitting")


def _add_fit_flags(sp) -> None:
    sp.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    sp.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    sp.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")
    sp.add_argument("--rel-tol", type=float, default=None, dest="rel_tol")
    sp.add_argument("--blup-refresh-every", type=int, default=None,
                    dest="blup_refresh_every")
    sp.add_argument("--max-leaves", default=None, dest="max_leaves",
                    help="terminal node count, or 'cv' to select by cross-validation")
    sp.add_argument("--cv-folds", type=int, default=None, dest="cv_folds")
    sp.add_argument("--cv-candidates", default=None, dest="cv_candidates",
                    help="leaf candidates for cv, e.g. '1-8' or '2,4,6'")
    sp.add_argument("--min-region-fraction", type=float, default=None,
                    dest="min_region_fraction")
    sp.add_argument("--min-leaf", type=int, default=None, dest="min_leaf")
    sp.add_argument("--family", default=None, choices=["gaussian", "poisson", "bernoulli"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gtimm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("simulate", help="write the four-cluster simulation to CSV")
    _add_common(sp)
    sp.add_argument("--n", type=int, default=2000, help="total observations (default 2000)")
    sp.add_argument("--sigma-b2", type=float, default=2.0, dest="sigma_b2")
    sp.add_argument("--sigma-eps2", type=float, default=1.0, dest="sigma_eps2")
    sp.add_argument("--groups", type=int, default=10, help="random-effect groups (default 10)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit the tree-informed mixed model")
    _add_common(sp)
    _add_schema(sp)
    _add_fit_flags(sp)
    sp.add_argument("--emit-regions", action="store_true",
                    help="also write regions.csv (needs region_true in the data)")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("predict", help="predict from a saved model file")
    _add_common(sp)
    sp.add_argument("--model", required=True, help="model file from fit")
    sp.add_argument("--data", required=True, help="input CSV")
    sp.add_argument("--y-col", default=None)
    sp.add_argument("--x-cols", default=None)
    sp.add_argument("--group-col", default=None)
    sp.add_argument("--include-random", action=argparse.BooleanOptionalAction,
                    default=True, help="add the group random effect (default on)")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("benchmark", help="train/test MSPE of all models")
    _add_common(sp)
    _add_schema(sp)
    _add_fit_flags(sp)
    sp.add_argument("--train-fraction", type=float, default=0.8, dest="train_fraction")
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("cv-leaves", help="cross-validate the number of terminal nodes")
    _add_common(sp)
    _add_schema(sp)
    sp.add_argument("--candidates", default="1-8", help="e.g. '1-8' or '2,4,6'")
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--min-leaf", type=int, default=None, dest="min_leaf")
    sp.set_defaults(func=cmd_cv_leaves)

    sp = sub.add_parser("gap-scaling", help="MSPE-gap decay experiment over N")
    _add_common(sp)
    sp.add_argument("--n-grid", default="500,1000,2000,4000,8000", dest="n_grid")
    sp.add_argument("--m", type=int, default=4, help="leaf count of the tree arm")
    sp.add_argument("--replications", type=int, default=20)
    sp.add_argument("--test-n", type=int, default=2000, dest="test_n")
    sp.set_defaults(func=cmd_gap_scaling)

    sp = sub.add_parser("crosstab", help="region-by-group contingency table")
    _add_common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--y-col", default=None)
    sp.add_argument("--x-cols", default=None)
    sp.add_argument("--group-col", default=None)
    sp.set_defaults(func=cmd_crosstab)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"gtimm: numerical failure: {exc}", file=sys.stderr)
        return 3
    except GtimmError as exc:
        print(f"gtimm: data error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"gtimm: data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"gtimm: usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
