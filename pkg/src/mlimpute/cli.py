"""Command-line interface: ``mlimpute {impute,cv,simulate,run-master,serve-worker}``."""

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from .benchmark import (SimulationConfig, impute_global,
                        impute_mean_proportion, impute_separate, run_benchmark)
from .data import CATEGORICAL, GROUP, QUANTITATIVE, ColumnSchema, GroupStructure, MixedDataset
from .errors import InvalidConfig, InvalidSchema, MLImputeError, ParseError, SchemaMismatch
from .imputation import ImputationOptions, impute_mlfamd, impute_mlmca, impute_mlpca
from .selection import cross_validate_ranks

METHODS = ("mlpca", "mlmca", "mlfamd", "global", "separate", "mean")
DISTRIBUTED_METHODS = ("mlpca", "mlmca", "mlfamd")


# -- schema and CSV ---------------------------------------------------------

def load_schema(path):
    """Read a JSON schema: a list of column objects (or ``{"columns": [...]}``).

    Each column has ``name``, ``kind`` (quantitative or categorical),
    ``categories`` for categorical columns, and ``group: true`` on exactly one
    column.
    """
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidSchema(f"schema is not valid JSON: {exc}") from None
    cols = raw.get("columns") if isinstance(raw, dict) else raw
    if not isinstance(cols, list):
        raise InvalidSchema("schema must be a list of columns")
    out = {}
    for c in cols:
        if not isinstance(c, dict) or "name" not in c:
            raise InvalidSchema(f"bad column entry {c!r}")
        name = str(c["name"])
        if name in out:
            raise InvalidSchema(f"duplicate column {name!r}")
        if c.get("group"):
            out[name] = ColumnSchema(name, role=GROUP)
        else:
            out[name] = ColumnSchema(name, c.get("kind", QUANTITATIVE),
                                     tuple(c.get("categories", ())))
    return out


@dataclass
class CsvSource:
    """Original header, tokens and line terminator, kept for faithful output."""

    header: list
    rows: list
    lineterminator: str


def _line_terminator(path):
    with open(path, "rb") as fh:
        first = fh.readline()
    return "\r\n" if first.endswith(b"\r\n") else "\n"


def load_dataset(csv_path, schema_path, na_token="NA"):
    """Parse a CSV file against a schema file into a :class:`MixedDataset`.

    Cells equal to ``na_token`` are missing.  Group labels become groups in
    order of first appearance.  The original tokens are kept in
    ``dataset.extra["source"]``.
    """
    columns = load_schema(schema_path)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, None, "empty file") from None
        except csv.Error as exc:
            raise ParseError(1, None, str(exc)) from None
        if sorted(header) != sorted(columns) or len(set(header)) != len(header):
            raise SchemaMismatch(
                f"CSV header {header} does not match schema columns {sorted(columns)}")
        rows = []
        try:
            for row in reader:
                if not row:
                    continue
                if len(row) != len(header):
                    raise ParseError(reader.line_num, None,
                                     f"expected {len(header)} fields, got {len(row)}")
                rows.append((reader.line_num, row))
        except csv.Error as exc:
            raise ParseError(reader.line_num, None, str(exc)) from None
    if not rows:
        raise ParseError(2, None, "no data rows")

    schema = tuple(columns[h] for h in header)
    quant, cat, groups = [], [], []
    for line, row in rows:
        q, c = [], []
        for col, tok in zip(schema, row):
            if col.role == GROUP:
                if tok == na_token:
                    raise ParseError(line, col.name, "group label is missing")
                groups.append(tok)
            elif col.kind == CATEGORICAL:
                if tok == na_token:
                    c.append(-1)
                elif tok in col.categories:
                    c.append(col.categories.index(tok))
                else:
                    raise ParseError(line, col.name, f"unknown category {tok!r}")
            else:
                if tok == na_token:
                    q.append(np.nan)
                    continue
                try:
                    v = float(tok)
                except ValueError:
                    raise ParseError(line, col.name, f"not a number: {tok!r}") from None
                if not math.isfinite(v):
                    raise ParseError(line, col.name, f"non-finite value {tok!r}")
                q.append(v)
        quant.append(q)
        cat.append(c)
    n = len(rows)
    ds = MixedDataset(schema, np.array(quant, dtype=float).reshape(n, -1),
                      np.array(cat, dtype=int).reshape(n, -1),
                      GroupStructure.from_labels(groups))
    ds.extra["source"] = CsvSource(header, [r for _, r in rows], _line_terminator(csv_path))
    return ds


def format_value(v):
    return repr(float(v))


def write_completed(path, original, completed):
    """Write ``completed`` in the input's column and row order.

    Observed cells keep their original tokens; imputed cells are written as
    shortest round-trip decimals or category labels.
    """
    src = original.extra["source"]
    qi = {c.name: j for j, c in enumerate(original.quantitative_columns)}
    ci = {c.name: j for j, c in enumerate(original.categorical_columns)}
    qmiss = np.isnan(original.quantitative)
    cmiss = original.categorical < 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator=src.lineterminator)
        w.writerow(src.header)
        for i, row in enumerate(src.rows):
            out = list(row)
            for k, col in enumerate(original.schema):
                if col.name in qi and qmiss[i, qi[col.name]]:
                    out[k] = format_value(completed.quantitative[i, qi[col.name]])
                elif col.name in ci and cmiss[i, ci[col.name]]:
                    code = completed.categorical[i, ci[col.name]]
                    out[k] = col.categories[code]
            w.writerow(out)


def sidecar(result, dataset, method, ranks):
    cats = dataset.categorical_columns
    fuzzy = []
    for (i, j), m in sorted(result.fuzzy_memberships.items()):
        fuzzy.append({"row": i, "column": cats[j].name,
                      "memberships": dict(zip(cats[j].categories, map(float, m)))})
    return {"method": method, "ranks": ranks, "iterations": result.iterations,
            "converged": bool(result.converged),
            "objective_trace": [float(x) for x in result.objective_trace],
            "fuzzy_memberships": fuzzy}


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, allow_nan=True)
        fh.write("\n")


# -- commands ---------------------------------------------------------------

def options_from(args):
    try:
        return ImputationOptions(tol=args.tol, max_iter=args.max_iter,
                                 regularize=not args.no_regularize, seed=args.seed)
    except ValueError as exc:
        raise InvalidConfig(str(exc)) from None


def run_method(method, dataset, qb, qw, opts):
    if method == "mlpca":
        return impute_mlpca(dataset, qb, qw, opts)
    if method == "mlmca":
        return impute_mlmca(dataset, qb, qw, opts)
    if method == "mlfamd":
        return impute_mlfamd(dataset, qb, qw, opts)
    if method == "global":
        return impute_global(dataset, qw, opts)
    if method == "separate":
        return impute_separate(dataset, qw, opts)
    return impute_mean_proportion(dataset)


def cmd_impute(args):
    ds = load_dataset(args.input, args.schema, args.na_token)
    res = run_method(args.method, ds, args.qb, args.qw, options_from(args))
    write_completed(args.output, ds, res.completed)
    write_json(args.sidecar or args.output + ".json",
               sidecar(res, ds, args.method, {"qb": args.qb, "qw": args.qw}))
    return 0


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidConfig(f"expected comma-separated integers, got {text!r}") from None


def cmd_cv(args):
    ds = load_dataset(args.input, args.schema, args.na_token)
    grid = [(a, b) for a in _int_list(args.qb_grid) for b in _int_list(args.qw_grid)]
    method = args.method if args.method in DISTRIBUTED_METHODS else None
    res = cross_validate_ranks(ds, grid, args.holdout, args.repeats, args.seed, method,
                               options_from(args))
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["qb", "qw", "mean_score"] + [f"repeat_{r}" for r in range(args.repeats)])
        for g, (qb, qw) in enumerate(res.grid):
            w.writerow([qb, qw, repr(float(res.mean_scores[g]))]
                       + [repr(float(s)) for s in res.scores[:, g]])
    print(json.dumps({"qb": res.q_between, "qw": res.q_within}))
    return 0


def load_simulation(path):
    """``{"simulation": {...}, "methods": [...], "replications": n, "ranks": {...},
    "options": {...}}``; only ``simulation`` is required."""
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict) or "simulation" not in raw:
        raise InvalidConfig("config needs a 'simulation' object")
    cfg = SimulationConfig.from_dict(raw["simulation"])
    methods = raw.get("methods", ["mlpca", "global", "mean"])
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise InvalidConfig(f"unknown methods {bad}")
    try:
        opts = ImputationOptions(**raw.get("options", {}))
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"bad options: {exc}") from None
    return cfg, methods, int(raw.get("replications", 100)), raw.get("ranks", {}), opts


def cmd_simulate(args):
    cfg, methods, reps, ranks, opts = load_simulation(args.config)
    t0 = time.perf_counter()
    report = run_benchmark(cfg, methods, reps, ranks, opts)
    os.makedirs(args.output_dir, exist_ok=True)
    report.write_csv(os.path.join(args.output_dir, "report.csv"))
    summary = report.summary()
    summary["wall_seconds"] = time.perf_counter() - t0
    write_json(os.path.join(args.output_dir, "summary.json"), summary)
    return 0


def cmd_master(args):
    from .distributed import Master, tcp_line_transport

    opts = options_from(args)
    listener = tcp_line_transport(args.listen, args.workers, timeout=args.timeout)
    print(json.dumps({"listening": "%s:%d" % tuple(listener.address)}), flush=True)
    endpoint = listener.accept(args.timeout)
    master = Master(endpoint)
    try:
        master.handshake()
        run = master.impute(args.method, args.qb, args.qw, opts)
        master.shutdown()
    except MLImputeError as exc:
        master.abort(exc)
        raise
    finally:
        endpoint.close()
    summary = {"sites": [str(s) for s in master.sites], "iterations": run.iterations,
               "converged": run.converged, "objective_trace": run.objective_trace}
    if args.output:
        write_json(args.output, summary)
    print(json.dumps({"iterations": run.iterations, "converged": run.converged}))
    return 0


def cmd_worker(args):
    from .distributed import WorkerSite, tcp_connect

    ds = load_dataset(args.data, args.schema, args.na_token)
    # The whole site is one group, whatever its group column says.
    site = ds.with_values(groups=GroupStructure.single(ds.n))
    site.extra = ds.extra
    site_id = args.site_id or os.path.splitext(os.path.basename(args.data))[0]
    link = tcp_connect(args.master, args.timeout)
    worker = WorkerSite(site_id, site, link)
    try:
        worker.run()
    finally:
        link.close()
    if args.output and worker.result is not None:
        write_completed(args.output, ds, worker.result.completed)
        write_json(args.output + ".json", sidecar(worker.result, ds, "distributed",
                                                  {"site_id": site_id}))
    return 0


# -- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidConfig(message)


def _add_options(p):
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-regularize", action="store_true")


def build_parser():
    parser = _Parser(prog="mlimpute", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("impute", help="impute a CSV file")
    p.add_argument("--input", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--sidecar", help="JSON sidecar path (default: OUTPUT.json)")
    p.add_argument("--method", choices=METHODS, default="mlfamd")
    p.add_argument("--qb", type=int, default=1)
    p.add_argument("--qw", type=int, default=2,
                   help="within rank; also the rank of global and separate")
    p.add_argument("--na-token", default="NA")
    _add_options(p)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("cv", help="cross-validate (Q_b, Q_w)")
    p.add_argument("--input", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--method", choices=DISTRIBUTED_METHODS)
    p.add_argument("--qb-grid", default="0,1,2")
    p.add_argument("--qw-grid", default="1,2,3")
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--na-token", default="NA")
    _add_options(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("simulate", help="run the simulation benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run-master", help="coordinate a distributed imputation over TCP")
    p.add_argument("--workers", type=int, required=True)
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--method", choices=DISTRIBUTED_METHODS, required=True)
    p.add_argument("--qb", type=int, required=True)
    p.add_argument("--qw", type=int, required=True)
    p.add_argument("--output", help="JSON run summary")
    p.add_argument("--timeout", type=float, default=300.0)
    _add_options(p)
    p.set_defaults(func=cmd_master)

    p = sub.add_parser("serve-worker", help="serve one site's data to a master")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--master", required=True, help="host:port")
    p.add_argument("--site-id")
    p.add_argument("--output", help="completed CSV for this site")
    p.add_argument("--na-token", default="NA")
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_worker)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except MLImputeError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "io_error", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
