"""Disjunctive coding and the MCA / FAMD weightings, with their inverses."""

from dataclasses import dataclass

import numpy as np

from .data import ColumnSchema, CATEGORICAL, encode_labels
from .errors import (ConstantComponent, EmptyCategory, SingularWeight,
                     ZeroVariance)


def category_blocks(n_categories, offset=0):
    """Column slice of each variable's indicator block."""
    blocks, start = [], offset
    for c in n_categories:
        blocks.append(slice(start, start + c))
        start += c
    return tuple(blocks)


@dataclass(frozen=True)
class DisjunctiveTable:
    """Indicator (``hard``) or fuzzy coding of categorical variables.

    ``proportions`` are the category margins the weighting uses; for a table
    coded from data they are computed over observed rows.
    """

    values: np.ndarray
    blocks: tuple
    proportions: np.ndarray
    hard: bool = False

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def n_variables(self):
        return len(self.blocks)

    def block_sums(self):
        """(n, n_variables) per-variable row sums."""
        return np.column_stack([self.values[:, b].sum(axis=1) for b in self.blocks]) \
            if self.blocks else np.zeros((self.n, 0))


def disjunctive_from_codes(codes, n_categories):
    """Indicator table from category codes (-1 = missing).

    Missing cells expand to a fully missing block row in the returned mask; in
    the table itself those rows hold the observed proportions.

    Returns
    -------
    table : DisjunctiveTable
    expanded_mask : (n, C) bool, True where observed
    """
    codes = np.asarray(codes, dtype=int)
    n = codes.shape[0]
    blocks = category_blocks(n_categories)
    C = sum(n_categories)
    Z = np.zeros((n, C))
    mask = np.zeros((n, C), dtype=bool)
    pi = np.zeros(C)
    for j, (b, nc) in enumerate(zip(blocks, n_categories)):
        obs = codes[:, j] >= 0
        rows = np.flatnonzero(obs)
        Z[rows, b.start + codes[rows, j]] = 1.0
        mask[obs, b] = True
        counts = Z[obs, b].sum(axis=0)
        if obs.sum() == 0 or np.any(counts == 0):
            empty = np.flatnonzero(counts == 0)
            raise EmptyCategory(
                f"variable {j}: categories {empty.tolist()} never observed")
        pi[b] = counts / obs.sum()
        Z[~obs, b] = pi[b]
    return DisjunctiveTable(Z, blocks, pi, hard=bool(mask.all())), mask


def disjunctive_code(values, categories, mask=None, names=None):
    """Code a grid of category labels as a disjunctive table.

    Parameters
    ----------
    values : (n, p_c) labels; None/NaN cells are missing.
    categories : one sequence of labels per column, in coding order.
    mask : optional (n, p_c) observation mask; cells with 0 are missing.
    """
    values = np.asarray(values, dtype=object)
    if values.ndim == 1:
        values = values[:, None]
    names = names or [f"c{j + 1}" for j in range(values.shape[1])]
    codes = np.empty(values.shape, dtype=int)
    for j, cats in enumerate(categories):
        col = ColumnSchema(names[j], CATEGORICAL, tuple(cats))
        codes[:, j] = encode_labels(values[:, j], col)
    if mask is not None:
        codes[~np.asarray(mask, dtype=bool)] = -1
    return disjunctive_from_codes(codes, [len(c) for c in categories])


def mca_weights(proportions, n, p):
    """Column multipliers of the MCA transform, ``1 / (n p sqrt(pi_c))``."""
    pi = np.asarray(proportions, dtype=float)
    if np.any(pi <= 0):
        raise SingularWeight(f"category proportions must be positive, got min {pi.min()}")
    return 1.0 / (n * p * np.sqrt(pi))


def mca_transform(Z, p=None):
    """``A = (Z - 1 pi^T) D_pi^{-1/2} / (n p)`` with ``p`` categorical variables."""
    p = Z.n_variables if p is None else p
    pi = Z.proportions
    if np.any(pi >= 1):
        raise SingularWeight("a category has proportion 1 (constant column)")
    return (Z.values - pi) * mca_weights(pi, Z.n, p)


def mca_inverse(A_hat, proportions, n, p, blocks=None):
    """Fuzzy table ``n p A_hat D_pi^{1/2} + 1 pi^T``."""
    pi = np.asarray(proportions, dtype=float)
    A_hat = np.asarray(A_hat, dtype=float)
    if A_hat.shape[1] != len(pi):
        raise ValueError(f"expected {len(pi)} columns, got {A_hat.shape[1]}")
    Z = A_hat / mca_weights(pi, n, p) + pi
    if blocks is None:
        blocks = (slice(0, len(pi)),)
    return DisjunctiveTable(Z, tuple(blocks), pi, hard=False)


@dataclass(frozen=True)
class ColumnStatistics:
    means: np.ndarray
    std_devs: np.ndarray
    proportions: np.ndarray
    group_sizes: np.ndarray


def compute_statistics(Y_q, Z_values, groups=None):
    """Population means / standard deviations of ``Y_q`` and margins of ``Z``."""
    Y_q = np.asarray(Y_q, dtype=float)
    Z_values = np.asarray(Z_values, dtype=float)
    n = Y_q.shape[0] if Y_q.size else Z_values.shape[0]
    sizes = groups.sizes if groups is not None else np.array([n])
    return ColumnStatistics(
        means=Y_q.mean(axis=0) if Y_q.shape[1] else np.zeros(0),
        std_devs=Y_q.std(axis=0) if Y_q.shape[1] else np.zeros(0),
        proportions=Z_values.mean(axis=0) if Z_values.shape[1] else np.zeros(0),
        group_sizes=np.asarray(sizes),
    )


def famd_weights(stats, n, p_c, names=None):
    """Column multipliers of the FAMD transform.

    Quantitative columns are divided by their standard deviation; categorical
    columns get the MCA weight with ``p`` the number of categorical variables.
    """
    sd = np.asarray(stats.std_devs, dtype=float)
    zero = np.flatnonzero(sd <= 0)
    if zero.size:
        j = int(zero[0])
        raise ZeroVariance(names[j] if names else j)
    w_q = 1.0 / sd
    w_c = mca_weights(stats.proportions, n, p_c) if p_c else np.zeros(0)
    return np.concatenate([w_q, w_c])


def famd_transform(Y_q, Z, stats):
    """``W = ((Y_q - 1 m^T) Sigma^{-1}, (Z - 1 pi^T) D_pi^{-1/2} / (n p_c))``."""
    Y_q = np.asarray(Y_q, dtype=float)
    Zv = Z.values if Z is not None else np.zeros((Y_q.shape[0], 0))
    p_c = Z.n_variables if Z is not None else 0
    n = Y_q.shape[0] if Y_q.shape[1] else Zv.shape[0]
    center = np.concatenate([stats.means, stats.proportions])
    X = np.hstack([Y_q.reshape(n, -1), Zv])
    return (X - center) * famd_weights(stats, n, p_c)


def famd_inverse(W_hat, stats, blocks=()):
    """Invert :func:`famd_transform`: returns ``(Y_q_hat, Z_hat)``."""
    W_hat = np.asarray(W_hat, dtype=float)
    p_q = len(stats.means)
    C = len(stats.proportions)
    if W_hat.shape[1] != p_q + C:
        raise ValueError(f"expected {p_q + C} columns, got {W_hat.shape[1]}")
    n = W_hat.shape[0]
    w = famd_weights(stats, n, len(blocks))
    center = np.concatenate([stats.means, stats.proportions])
    X = W_hat / w + center
    Z = DisjunctiveTable(X[:, p_q:], tuple(blocks), np.asarray(stats.proportions), hard=False)
    return X[:, :p_q], Z


def hard_assign(block_row):
    """Index of the largest membership; ties go to the lowest index."""
    row = np.asarray(block_row, dtype=float)
    if row.size == 0:
        raise ValueError("empty block")
    return int(np.argmax(row))


def correlation_ratio(component, codes):
    """eta^2: between-category share of the variance of ``component``."""
    x = np.asarray(component, dtype=float)
    xc = x - x.mean()
    total = xc @ xc
    between = 0.0
    for c in np.unique(codes):
        sel = codes == c
        between += sel.sum() * xc[sel].mean() ** 2
    return between / total


def link_criterion(component, dataset):
    """Sum of squared correlations with quantitative columns plus correlation
    ratios with categorical columns, on complete data."""
    x = np.asarray(component, dtype=float)
    xc = x - x.mean()
    if np.allclose(xc, 0.0, atol=1e-14 * max(1.0, np.abs(x).max())):
        raise ConstantComponent("component is constant")
    total = 0.0
    for y in dataset.quantitative.T:
        yc = y - y.mean()
        total += (xc @ yc) ** 2 / ((xc @ xc) * (yc @ yc))
    for codes in dataset.categorical.T:
        total += correlation_ratio(x, codes)
    return total
