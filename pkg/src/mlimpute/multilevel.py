"""Between/within decompositions and complete-data multilevel fits."""

from dataclasses import dataclass, field

import numpy as np

from .encoding import (category_blocks, compute_statistics, disjunctive_from_codes,
                       famd_weights, mca_weights)
from .errors import RankTooLarge, SingularWeight
from .linalg import DEFAULT_MAX_ITER, DEFAULT_TOL, shrink_from_total, truncated_svd


@dataclass(frozen=True)
class SvdSettings:
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    seed: int = 0
    refine: bool = True
    strict: bool = True


def between_within_split(X, groups):
    """``X = 1 m^T + X_b + X_w`` with ``X_b`` the group-mean deviations."""
    X = np.asarray(X, dtype=float)
    m = X.mean(axis=0)
    G = groups.means(X)
    X_b = groups.expand(G - m)
    X_w = X - groups.expand(G)
    return m, X_b, X_w


def sum_of_squares_check(X, groups):
    """Per-column (total, offset, between, within) sums of squares."""
    m, X_b, X_w = between_within_split(X, groups)
    X = np.asarray(X, dtype=float)
    total = (X ** 2).sum(axis=0)
    offset = groups.n * m ** 2
    between = (X_b ** 2).sum(axis=0)
    within = (X_w ** 2).sum(axis=0)
    return total, offset, between, within


@dataclass
class LevelFit:
    left: np.ndarray
    singular_values: np.ndarray
    shrunk: np.ndarray
    loadings: np.ndarray
    sigma2: float
    converged: tuple = ()

    @property
    def eigenvalues(self):
        return self.singular_values ** 2


def fit_level(M, Q, effective_rank, regularize, settings, seed_offset=0, start=None):
    """Truncated (optionally shrunk) SVD of one level."""
    n, p = M.shape
    if Q == 0:
        return LevelFit(np.zeros((n, 0)), np.zeros(0), np.zeros(0), np.zeros((p, 0)), 0.0)
    res = truncated_svd(M, Q, tol=settings.tol, max_iter=settings.max_iter,
                        seed=settings.seed + seed_offset, start=start,
                        refine=settings.refine, strict=settings.strict)
    total = float((M ** 2).sum())
    shrunk, sigma2 = shrink_from_total(res.singular_values, total, effective_rank)
    if not regularize:
        shrunk = res.singular_values.copy()
    return LevelFit(res.left_vectors, res.singular_values, shrunk, res.right_vectors,
                    sigma2, res.converged)


@dataclass
class MultilevelModel:
    """Fitted offset, between and within structures in working coordinates.

    Working coordinates relate to the raw columns through
    ``working = (raw - center) * weights``.
    """

    offset: np.ndarray
    between_scores: np.ndarray
    between_loadings: np.ndarray
    within_scores: np.ndarray
    within_loadings: np.ndarray
    between_eigenvalues: np.ndarray
    within_eigenvalues: np.ndarray
    ranks: tuple
    noise: tuple
    groups: object
    center: np.ndarray = None
    weights: np.ndarray = None
    blocks: tuple = ()
    converged: tuple = field(default=())

    def between_fitted(self):
        """(K, p) fitted between rows."""
        return self.between_scores @ self.between_loadings.T

    def within_fitted(self):
        return self.within_scores @ self.within_loadings.T

    def fitted(self):
        return (self.offset + self.groups.expand(self.between_fitted())
                + self.within_fitted())

    def reconstruct(self):
        """Fitted values mapped back to raw columns."""
        F = self.fitted()
        if self.weights is None:
            return F
        return F / self.weights + self.center

    def objective(self, X):
        """Least-squares criterion ``||X - fitted||^2`` in working coordinates."""
        return float(((np.asarray(X) - self.fitted()) ** 2).sum())


def check_ranks(groups, Q_b, Q_w, rank_dim):
    K, n = groups.K, groups.n
    if Q_b < 0 or Q_b > min(K - 1, rank_dim):
        raise RankTooLarge(f"Q_b={Q_b} exceeds min(K-1, p)={min(K - 1, rank_dim)}")
    if Q_w < 0 or Q_w > min(n - K, rank_dim):
        raise RankTooLarge(f"Q_w={Q_w} exceeds min(n-K, p)={min(n - K, rank_dim)}")


def decompose(X, groups, Q_b, Q_w, regularize, rank_dim, settings, starts=(None, None)):
    """Offset plus rank-``Q_b`` between and rank-``Q_w`` within fit of ``X``.

    The between SVD runs on the compact (K, p) matrix of group-mean deviations
    with rows scaled by ``sqrt(n_k)``, whose spectrum equals that of the
    replicated (n, p) matrix.
    """
    X = np.asarray(X, dtype=float)
    m = X.mean(axis=0)
    means = groups.means(X)
    sq = np.sqrt(groups.sizes)
    between = fit_level((means - m) * sq[:, None], Q_b,
                        min(groups.K - 1, rank_dim), regularize, settings, 0, starts[0])
    within = fit_level(X - groups.expand(means), Q_w,
                       min(groups.n - groups.K, rank_dim), regularize, settings, 1,
                       starts[1])
    return _assemble(m, between, within, groups)


def _assemble(offset, between, within, groups, **extra):
    sq = np.sqrt(groups.sizes)
    return MultilevelModel(
        offset=offset,
        between_scores=between.left * between.shrunk / sq[:, None],
        between_loadings=between.loadings,
        within_scores=within.left * within.shrunk,
        within_loadings=within.loadings,
        between_eigenvalues=between.eigenvalues,
        within_eigenvalues=within.eigenvalues,
        ranks=(len(between.shrunk), len(within.shrunk)),
        noise=(between.sigma2, within.sigma2),
        groups=groups,
        converged=between.converged + within.converged,
        **extra,
    )


def fit_mlpca(Y, groups, Q_b, Q_w, regularize=False, settings=SvdSettings()):
    """Multilevel PCA of a complete quantitative matrix."""
    Y = np.asarray(Y, dtype=float)
    check_ranks(groups, Q_b, Q_w, Y.shape[1])
    return decompose(Y, groups, Q_b, Q_w, regularize, Y.shape[1], settings)


def fit_mlmca(Z, groups, Q_b, Q_w, regularize=False, settings=SvdSettings()):
    """Multilevel MCA of a complete disjunctive table.

    Between part: MCA weighting of the per-group category proportions.
    Within part: the same weighting of the table with those proportions swept
    out.  Reconstruction through :meth:`MultilevelModel.reconstruct` gives the
    fuzzy table ``Z_b_hat + Z_w_hat``.
    """
    pi = Z.proportions
    if np.any(pi <= 0):
        raise SingularWeight("category with zero proportion")
    n, p = Z.n, Z.n_variables
    rank_dim = Z.values.shape[1] - p
    check_ranks(groups, Q_b, Q_w, rank_dim)
    w = mca_weights(pi, n, p)
    Zb = groups.means(Z.values)
    sq = np.sqrt(groups.sizes)
    between = fit_level((Zb - pi) * w * sq[:, None], Q_b, min(groups.K - 1, rank_dim),
                        regularize, settings, 0)
    within = fit_level((Z.values - groups.expand(Zb)) * w, Q_w,
                       min(n - groups.K, rank_dim), regularize, settings, 1)
    return _assemble(np.zeros(len(pi)), between, within, groups,
                     center=pi.copy(), weights=w, blocks=Z.blocks)


def fit_mlfamd(dataset, Q_b, Q_w, regularize=False, settings=SvdSettings()):
    """Multilevel FAMD of a complete mixed dataset.

    Statistics (means, standard deviations, proportions) are pooled over all
    groups so that every group shares the same weighting.
    """
    if not dataset.is_complete:
        raise ValueError("fit_mlfamd needs complete data; use impute_mlfamd")
    Y_q = dataset.quantitative
    p_c = len(dataset.categorical_columns)
    if p_c:
        Z, _ = disjunctive_from_codes(dataset.categorical, dataset.n_categories)
        Zv = Z.values
    else:
        Zv = np.zeros((dataset.n, 0))
    stats = compute_statistics(Y_q, Zv, dataset.groups)
    w = famd_weights(stats, dataset.n, p_c,
                     [c.name for c in dataset.quantitative_columns])
    center = np.concatenate([stats.means, stats.proportions])
    W = (np.hstack([Y_q, Zv]) - center) * w
    rank_dim = Y_q.shape[1] + Zv.shape[1] - p_c
    check_ranks(dataset.groups, Q_b, Q_w, rank_dim)
    model = decompose(W, dataset.groups, Q_b, Q_w, regularize, rank_dim, settings)
    model.center = center
    model.weights = w
    model.blocks = category_blocks(dataset.n_categories, Y_q.shape[1])
    return model
