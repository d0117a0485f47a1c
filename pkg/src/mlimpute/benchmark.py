"""Simulation study: synthetic multilevel data, MCAR masking, baselines, metrics."""

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import CATEGORICAL, GROUP, ColumnSchema, GroupStructure, MixedDataset
from .errors import (EmptyColumn, EmptyEvaluationSet, InvalidConfig, MaskInfeasible,
                     MLImputeError)
from .imputation import (ImputationResult, impute_mlfamd,
                         impute_mlmca, impute_mlpca)


@dataclass(frozen=True)
class SimulationConfig:
    """Design of one simulated dataset.

    Scores are drawn standard normal and multiplied by ``scale * sqrt(p)``
    while loadings are orthonormal, so each level adds on average
    ``q * scale**2`` of variance per cell.
    """

    K: int = 5
    n_k: int = 20
    p_q: int = 10
    p_c: int = 0
    q_between: int = 2
    q_within: int = 2
    noise: float = 1.0
    missing_fraction: float = 0.3
    categories_per_variable: int = 3
    seed: int = 0
    between_scale: float = 1.0
    within_scale: float = 1.0

    def __post_init__(self):
        p = self.p_q + self.p_c
        n = self.K * self.n_k
        if self.K < 1 or self.n_k < 1 or p < 1:
            raise InvalidConfig("K, n_k and p must be positive")
        if not 0 <= self.missing_fraction < 1:
            raise InvalidConfig("missing_fraction must lie in [0, 1)")
        if self.noise < 0:
            raise InvalidConfig("noise must be nonnegative")
        if self.q_between < 0 or self.q_between > min(self.K - 1, p):
            raise InvalidConfig(f"q_between must be <= min(K-1, p) = {min(self.K - 1, p)}")
        if self.q_within < 0 or self.q_within > min(n - self.K, p):
            raise InvalidConfig(f"q_within must be <= min(n-K, p) = {min(n - self.K, p)}")
        if self.p_c and not 2 <= self.categories_per_variable <= n:
            raise InvalidConfig("categories_per_variable must lie in [2, n]")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown simulation fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None


@dataclass
class GroundTruth:
    offset: np.ndarray
    between_scores: np.ndarray
    between_loadings: np.ndarray
    within_scores: np.ndarray
    within_loadings: np.ndarray
    noise: np.ndarray
    latent: np.ndarray


def _orthonormal(rng, p, q):
    if q == 0:
        return np.zeros((p, 0))
    Qm, R = np.linalg.qr(rng.standard_normal((p, q)))
    return Qm * np.sign(np.diag(R))


def generate_multilevel_data(config, seed=None):
    """Draw a complete dataset from the multilevel model plus Gaussian noise.

    The last ``p_c`` simulated columns are cut into ``categories_per_variable``
    equal-probability bins.  Returns ``(dataset, truth)``.
    """
    c = config
    rng = np.random.default_rng(c.seed if seed is None else seed)
    p = c.p_q + c.p_c
    n = c.K * c.n_k
    groups = GroupStructure(np.repeat(np.arange(c.K), c.n_k),
                            tuple(f"g{k + 1}" for k in range(c.K)))
    sizes = groups.sizes

    f_b = rng.standard_normal((c.K, c.q_between)) * c.between_scale * np.sqrt(p)
    f_b -= sizes @ f_b / n
    V_b = _orthonormal(rng, p, c.q_between)
    F_w = rng.standard_normal((n, c.q_within)) * c.within_scale * np.sqrt(p)
    F_w -= groups.expand(groups.means(F_w)) if c.q_within else 0.0
    V_w = _orthonormal(rng, p, c.q_within)
    m = rng.standard_normal(p)
    E = rng.standard_normal((n, p)) * c.noise
    Y = m + groups.expand(f_b @ V_b.T) + F_w @ V_w.T + E

    quant = Y[:, :c.p_q]
    codes = np.zeros((n, c.p_c), dtype=int)
    probs = np.arange(1, c.categories_per_variable) / c.categories_per_variable
    for j in range(c.p_c):
        col = Y[:, c.p_q + j]
        cuts = np.quantile(col, probs)
        codes[:, j] = np.searchsorted(cuts, col, side="left")

    schema = [ColumnSchema("group", role=GROUP)]
    schema += [ColumnSchema(f"q{j + 1}") for j in range(c.p_q)]
    labels = tuple(str(i + 1) for i in range(c.categories_per_variable))
    schema += [ColumnSchema(f"c{j + 1}", CATEGORICAL, labels) for j in range(c.p_c)]
    dataset = MixedDataset(tuple(schema), quant, codes, groups)
    truth = GroundTruth(m, f_b, V_b, F_w, V_w, E, Y)
    return dataset, truth


def _mask_feasible(dataset, keep):
    kq, kc = dataset.split_feature_mask(keep)
    if not keep.any(axis=0).all():
        return False
    g = dataset.groups
    for k in range(g.K):
        if not keep[g.rows(k)].any():
            return False
    for j, nc in enumerate(dataset.n_categories):
        seen = np.unique(dataset.categorical[kc[:, j], j])
        if len(seen) < nc:
            return False
    return True


def apply_mcar_mask(dataset, fraction, seed, max_tries=100):
    """Mask each observed cell independently with probability ``fraction``.

    Draws are repeated (up to ``max_tries``) until every column, every group
    and every category keeps at least one observed cell.
    """
    if not 0 <= fraction < 1:
        raise InvalidConfig("fraction must lie in [0, 1)")
    observed = dataset.mask
    if fraction == 0:
        return dataset.with_values()
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        drop = (rng.random(observed.shape) < fraction) & observed
        if _mask_feasible(dataset, observed & ~drop):
            return dataset.masked(drop)
    raise MaskInfeasible(f"no feasible MCAR mask in {max_tries} draws")


def impute_mean_proportion(dataset):
    """Baseline: column means for quantitative cells, modal category for
    categorical cells (with the observed proportions as fuzzy memberships)."""
    quant = dataset.quantitative.copy()
    for j, col in enumerate(dataset.quantitative_columns):
        obs = ~np.isnan(quant[:, j])
        if not obs.any():
            raise EmptyColumn(f"column {col.name!r} has no observed value")
        quant[~obs, j] = quant[obs, j].mean()
    cat = dataset.categorical.copy()
    fuzzy = {}
    for j, col in enumerate(dataset.categorical_columns):
        obs = cat[:, j] >= 0
        if not obs.any():
            raise EmptyColumn(f"column {col.name!r} has no observed value")
        props = np.bincount(cat[obs, j], minlength=len(col.categories)) / obs.sum()
        for i in np.flatnonzero(~obs):
            fuzzy[(int(i), j)] = props.copy()
        cat[~obs, j] = int(np.argmax(props))
    return ImputationResult(dataset.with_values(quant, cat), fuzzy, None, 1, True, [], "mean")


def _single_level(dataset, Q, opts):
    flat = dataset.with_values(groups=GroupStructure.single(dataset.n))
    if dataset.kind == "quantitative":
        res = impute_mlpca(flat, 0, Q, opts)
    elif dataset.kind == "categorical":
        res = impute_mlmca(flat, 0, Q, opts)
    else:
        res = impute_mlfamd(flat, 0, Q, opts)
    res.completed = res.completed.with_values(groups=dataset.groups)
    return res


def impute_global(dataset, Q, opts=None):
    """Single-level iterative SVD imputation ignoring the groups (PCA, MCA or FAMD)."""
    res = _single_level(dataset, Q, opts)
    res.method = "global"
    return res


class GroupFailure(MLImputeError):
    code = "group_failure"

    def __init__(self, group, cause):
        super().__init__(f"group {group}: {cause}")
        self.group = group
        self.cause = cause


def impute_separate(dataset, Q, opts=None):
    """Single-level imputation run independently within each group."""
    g = dataset.groups
    quant = dataset.quantitative.copy()
    cat = dataset.categorical.copy()
    fuzzy = {}
    iterations, converged = 0, True
    for k in range(g.K):
        rows = g.rows(k)
        try:
            res = _single_level(dataset.subset(rows), Q, opts)
        except MLImputeError as exc:
            raise GroupFailure(k, exc) from exc
        quant[rows] = res.completed.quantitative
        cat[rows] = res.completed.categorical
        for (i, j), v in res.fuzzy_memberships.items():
            fuzzy[(int(rows[i]), j)] = v
        iterations = max(iterations, res.iterations)
        converged &= res.converged
    return ImputationResult(dataset.with_values(quant, cat), fuzzy, None, iterations,
                            converged, [], "separate")


def _cell_errors(result, truth, delta):
    dq, dc = truth.split_feature_mask(delta)
    sq_err = (result.completed.quantitative - truth.quantitative) ** 2
    wrong = result.completed.categorical != truth.categorical
    return dq, dc, sq_err, wrong


def score(result, truth, delta):
    """MSE over masked quantitative cells and misclassification rate over
    masked categorical cells.

    ``delta`` is the (n, p) feature mask of cells the harness removed.  A part
    with no masked cell scores NaN.
    """
    dq, dc, sq_err, wrong = _cell_errors(result, truth, np.asarray(delta, dtype=bool))
    if not dq.any() and not dc.any():
        raise EmptyEvaluationSet("no masked cell to score")
    mse = float(sq_err[dq].mean()) if dq.any() else float("nan")
    mis = float(wrong[dc].mean()) if dc.any() else float("nan")
    return mse, mis


def score_by_group(result, truth, delta):
    """Per-group MSE over masked quantitative cells (NaN for groups without any)."""
    dq, _, sq_err, _ = _cell_errors(result, truth, np.asarray(delta, dtype=bool))
    g = truth.groups
    out = np.full(g.K, np.nan)
    for k in range(g.K):
        rows = g.rows(k)
        if dq[rows].any():
            out[k] = sq_err[rows][dq[rows]].mean()
    return out


DEFAULT_RANKS = {"qb": 2, "qw": 2, "global": 4, "separate": 2}


def run_method(name, dataset, ranks, opts):
    if name == "mean":
        return impute_mean_proportion(dataset)
    if name == "global":
        return impute_global(dataset, ranks["global"], opts)
    if name == "separate":
        return impute_separate(dataset, ranks["separate"], opts)
    if name == "mlpca":
        return impute_mlpca(dataset, ranks["qb"], ranks["qw"], opts)
    if name == "mlmca":
        return impute_mlmca(dataset, ranks["qb"], ranks["qw"], opts)
    if name == "mlfamd":
        return impute_mlfamd(dataset, ranks["qb"], ranks["qw"], opts)
    raise InvalidConfig(f"unknown method {name!r}")


def replication_seeds(seed, replication):
    """(data seed, mask seed) for one replication; independent of run order."""
    ss = np.random.SeedSequence([seed, replication])
    a, b = ss.generate_state(2)
    return int(a), int(b)


@dataclass
class BenchmarkReport:
    config: SimulationConfig
    methods: list
    n_replications: int
    ranks: dict
    rows: list = field(default_factory=list)

    def values(self, method, key="mse"):
        return np.array([r[key] for r in self.rows if r["method"] == method], dtype=float)

    def group_deltas(self, reference, other):
        """Per-replication, per-group ``MSE(reference) - MSE(other)``."""
        a = np.array([r["group_mse"] for r in self.rows if r["method"] == reference])
        b = np.array([r["group_mse"] for r in self.rows if r["method"] == other])
        return a - b

    def summary(self):
        out = {"config": asdict(self.config), "ranks": self.ranks,
               "replications": self.n_replications, "methods": {}}
        mse = {m: self.values(m, "mse") for m in self.methods}
        for m in self.methods:
            failed = sum(1 for r in self.rows if r["method"] == m and r["error"])
            out["methods"][m] = {
                "median_mse": _nanmedian(mse[m]),
                "median_misclassification": _nanmedian(self.values(m, "misclassification")),
                "mean_seconds": float(np.mean(self.values(m, "seconds"))),
                "failures": failed,
                "wins": 0,
            }
        if self.methods:
            table = np.vstack([mse[m] for m in self.methods])
            for r in range(table.shape[1]):
                col = table[:, r]
                if np.all(np.isnan(col)):
                    continue
                out["methods"][self.methods[int(np.nanargmin(col))]]["wins"] += 1
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "replication", "mse", "misclassification", "seconds",
                        "iterations", "converged", "group_mse", "error"])
            for r in self.rows:
                w.writerow([r["method"], r["replication"], repr(r["mse"]),
                            repr(r["misclassification"]), repr(r["seconds"]),
                            r["iterations"], r["converged"],
                            ";".join(repr(float(x)) for x in r["group_mse"]), r["error"]])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, default=_json_default)


def _nanmedian(x):
    return float(np.nanmedian(x)) if x.size and not np.all(np.isnan(x)) else float("nan")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def run_benchmark(config, methods, n_replications, ranks=None, opts=None, timer=None):
    """Run every method on ``n_replications`` simulated, MCAR-masked datasets.

    Replication ``r`` uses seeds derived from ``(config.seed, r)``, so results
    do not depend on execution order.  Method failures are recorded in the
    ``error`` field of their row and the run continues.
    """
    ranks = {**DEFAULT_RANKS, **(ranks or {})}
    timer = timer or time.perf_counter
    report = BenchmarkReport(config, list(methods), n_replications, ranks)
    for rep in range(n_replications):
        data_seed, mask_seed = replication_seeds(config.seed, rep)
        truth, _ = generate_multilevel_data(config, data_seed)
        masked = apply_mcar_mask(truth, config.missing_fraction, mask_seed)
        delta = truth.mask & ~masked.mask
        for name in methods:
            t0 = timer()
            row = {"method": name, "replication": rep, "error": ""}
            try:
                res = run_method(name, masked, ranks, opts)
                row["seconds"] = timer() - t0
                row["mse"], row["misclassification"] = score(res, truth, delta)
                row["group_mse"] = score_by_group(res, truth, delta).tolist()
                row["iterations"], row["converged"] = res.iterations, res.converged
            except MLImputeError as exc:
                row.update(seconds=timer() - t0, mse=float("nan"),
                           misclassification=float("nan"),
                           group_mse=[float("nan")] * config.K, iterations=0,
                           converged=False, error=f"{exc.code}: {exc}")
            report.rows.append(row)
    return report
