"""Iterative multilevel imputation (MLPCA, MLMCA, MLFAMD).

All three methods run the same loop on a working matrix ``X = [Y_q, Z]``
(quantitative columns followed by the disjunctive coding of the categorical
ones):

1. recompute column means, standard deviations and category margins from the
   completed ``X`` and build ``W = (X - center) * weights``;
2. fit the between structure on group means of ``W``, then the within
   structure on ``W`` centered per group (regularized SVDs);
3. map the fit back to raw columns and overwrite the missing cells.

MLPCA uses unit weights (or standardization with ``scale=True``); MLMCA uses
the MCA weighting; MLFAMD concatenates both.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import QUANTITATIVE, CATEGORICAL
from .encoding import category_blocks, hard_assign, mca_weights
from .errors import (EmptyCategory, EmptyColumn, EmptyGroup, SchemaMismatch,
                     SingularWeight, ZeroVariance)
from .linalg import DEFAULT_MAX_ITER, DEFAULT_TOL
from .multilevel import MultilevelModel, SvdSettings, check_ranks, decompose

_EPS = 1e-12


@dataclass(frozen=True)
class ImputationOptions:
    tol: float = 1e-6
    max_iter: int = 1000
    regularize: bool = True
    seed: int = 0
    svd_tol: float = DEFAULT_TOL
    svd_max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    def svd_settings(self):
        # Plain power iteration + deflation, replayable by the distributed master.
        return SvdSettings(self.svd_tol, self.svd_max_iter, self.seed,
                           refine=False, strict=False)


@dataclass
class ImputationResult:
    completed: object
    fuzzy_memberships: dict
    model: MultilevelModel
    iterations: int
    converged: bool
    objective_trace: list = field(default_factory=list)
    method: str = ""


@dataclass(frozen=True)
class Layout:
    """Column layout of the working matrix."""

    p_q: int
    n_categories: tuple = ()
    scale: bool = True
    names: tuple = ()

    @classmethod
    def of(cls, dataset, scale=True):
        return cls(len(dataset.quantitative_columns), tuple(dataset.n_categories),
                   scale, tuple(c.name for c in dataset.quantitative_columns))

    @property
    def p_c(self):
        return len(self.n_categories)

    @property
    def C(self):
        return sum(self.n_categories)

    @property
    def P(self):
        return self.p_q + self.C

    @property
    def blocks(self):
        return category_blocks(self.n_categories, self.p_q)

    @property
    def rank_dim(self):
        return self.p_q + self.C - self.p_c

    def weights(self, means, std, n):
        if self.scale:
            zero = np.flatnonzero(std <= 0)
            if zero.size:
                j = int(zero[0])
                raise ZeroVariance(self.names[j] if self.names else j)
            w_q = 1.0 / std
        else:
            w_q = np.ones(self.p_q)
        if self.p_c:
            pi = means[self.p_q:]
            if np.any(pi <= 0):
                raise SingularWeight("a category margin dropped to zero")
            w_c = mca_weights(pi, n, self.p_c)
        else:
            w_c = np.zeros(0)
        return np.concatenate([w_q, w_c])

    def to_dict(self):
        return {"p_q": self.p_q, "n_categories": list(self.n_categories)}


def working_matrix(dataset):
    """Raw working matrix with NaN at missing cells, and its observation mask."""
    n = dataset.n
    blocks = category_blocks(dataset.n_categories)
    Z = np.zeros((n, sum(dataset.n_categories)))
    for j, b in enumerate(blocks):
        codes = dataset.categorical[:, j]
        obs = codes >= 0
        Z[np.flatnonzero(obs), b.start + codes[obs]] = 1.0
        Z[~obs, b] = np.nan
    X = np.hstack([dataset.quantitative, Z])
    return X, ~np.isnan(X)


def fill_values(obs_sums, obs_counts, layout):
    """Initial fill: observed means for quantitative columns, observed
    proportions for indicator columns."""
    obs_counts = np.asarray(obs_counts, dtype=float)
    empty = np.flatnonzero(obs_counts == 0)
    if empty.size:
        j = int(empty[0])
        if j < layout.p_q:
            name = layout.names[j] if layout.names else j
            raise EmptyColumn(f"column {name!r} has no observed value")
        raise EmptyColumn(f"categorical column at position {j} has no observed value")
    fill = np.asarray(obs_sums, dtype=float) / obs_counts
    cat = fill[layout.p_q:]
    if np.any(cat == 0):
        raise EmptyCategory(f"categories {np.flatnonzero(cat == 0).tolist()} never observed")
    return fill


def check_groups(observed, groups):
    for k in range(groups.K):
        if not observed[groups.rows(k)].any():
            raise EmptyGroup(f"group {groups.labels[k]!r} has no observed value")


def finalize(dataset, X, observed, layout):
    """Write the completed working matrix back into a dataset.

    Returns ``(completed, fuzzy)`` where ``fuzzy`` maps ``(row, j)`` of each
    imputed categorical cell to its membership vector.
    """
    quant = dataset.quantitative.copy()
    miss_q = ~observed[:, :layout.p_q]
    quant[miss_q] = X[:, :layout.p_q][miss_q]
    cat = dataset.categorical.copy()
    fuzzy = {}
    for j, b in enumerate(layout.blocks):
        for i in np.flatnonzero(cat[:, j] < 0):
            row = X[i, b].copy()
            fuzzy[(int(i), j)] = row
            cat[i, j] = hard_assign(row)
    return dataset.with_values(quant, cat), fuzzy


def _fit_step(X, observed, layout, groups, Q_b, Q_w, opts, starts):
    n = X.shape[0]
    means = X.mean(axis=0)
    std = X[:, :layout.p_q].std(axis=0)
    w = layout.weights(means, std, n)
    W = (X - means) * w
    model = decompose(W, groups, Q_b, Q_w, opts.regularize, layout.rank_dim,
                      opts.svd_settings(), starts)
    model.center, model.weights, model.blocks = means, w, layout.blocks
    W_hat = model.fitted()
    objective = float(((W - W_hat)[observed] ** 2).sum())
    return model, W_hat / w + means, objective


def run_iterations(dataset, layout, Q_b, Q_w, opts, callback=None, method=""):
    """Shared loop behind :func:`impute_mlpca`, :func:`impute_mlmca`, :func:`impute_mlfamd`."""
    opts = opts or ImputationOptions()
    groups = dataset.groups
    check_ranks(groups, Q_b, Q_w, layout.rank_dim)
    X, observed = working_matrix(dataset)
    check_groups(dataset.mask, groups)
    fill = fill_values(np.nansum(X, axis=0), observed.sum(axis=0), layout)
    miss = ~observed
    X = np.where(observed, X, fill)

    trace = []
    starts = (None, None)
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        model, X_hat, objective = _fit_step(X, observed, layout, groups, Q_b, Q_w,
                                            opts, starts)
        trace.append(objective)
        old = X[miss]
        X = X.copy()
        X[miss] = X_hat[miss]
        delta = np.linalg.norm(X[miss] - old) / max(np.linalg.norm(old), _EPS)
        if callback is not None:
            callback(it, X)
        starts = (model.between_loadings, model.within_loadings)
        if delta < opts.tol:
            converged = True
            break

    completed, fuzzy = finalize(dataset, X, observed, layout)
    return ImputationResult(completed, fuzzy, model, it, converged, trace, method)


def _require(dataset, kind, method):
    if dataset.kind != kind:
        raise SchemaMismatch(f"{method} needs {kind} data, got {dataset.kind}")


def impute_mlpca(dataset, Q_b, Q_w, opts=None, scale=False, callback=None):
    """Iterative multilevel PCA imputation of quantitative data.

    With ``scale=True`` columns are re-standardized at every iteration, which
    is the quantitative special case of :func:`impute_mlfamd`.
    """
    _require(dataset, QUANTITATIVE, "mlpca")
    return run_iterations(dataset, Layout.of(dataset, scale), Q_b, Q_w, opts,
                          callback, "mlpca")


def impute_mlmca(dataset, Q_b, Q_w, opts=None, callback=None):
    """Iterative multilevel MCA imputation of categorical data."""
    _require(dataset, CATEGORICAL, "mlmca")
    return run_iterations(dataset, Layout.of(dataset), Q_b, Q_w, opts, callback, "mlmca")


def impute_mlfamd(dataset, Q_b, Q_w, opts=None, callback=None):
    """Iterative multilevel FAMD imputation of mixed data.

    Also accepts purely quantitative or purely categorical data, where it
    coincides with scaled MLPCA or with MLMCA.
    """
    return run_iterations(dataset, Layout.of(dataset, scale=True), Q_b, Q_w, opts,
                          callback, "mlfamd")


METHODS = {
    "mlpca": impute_mlpca,
    "mlmca": impute_mlmca,
    "mlfamd": impute_mlfamd,
}
