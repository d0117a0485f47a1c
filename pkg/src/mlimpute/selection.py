"""Cross-validated choice of the between and within ranks."""

from dataclasses import dataclass

import numpy as np

from .benchmark import apply_mcar_mask, impute_mean_proportion, score
from .errors import InvalidConfig
from .imputation import METHODS, ImputationOptions


@dataclass
class CVResult:
    q_between: int
    q_within: int
    grid: list
    scores: np.ndarray  # (n_repeats, len(grid))

    @property
    def mean_scores(self):
        return self.scores.mean(axis=0)

    def table(self):
        """One row per grid point: (Q_b, Q_w, mean score)."""
        return [(qb, qw, float(s)) for (qb, qw), s in zip(self.grid, self.mean_scores)]


def _method_for(dataset, method):
    if method is not None:
        return METHODS[method]
    return {"quantitative": METHODS["mlpca"], "categorical": METHODS["mlmca"]}.get(
        dataset.kind, METHODS["mlfamd"])


def standardized_score(result, reference, truth, delta):
    """Quantitative MSE and misclassification, each divided by the
    mean/proportion-imputation score on the same held-out cells."""
    mse, mis = score(result, truth, delta)
    mse0, mis0 = score(reference, truth, delta)
    total = 0.0
    for v, v0 in ((mse, mse0), (mis, mis0)):
        if np.isnan(v):
            continue
        total += v / v0 if v0 > 0 else (0.0 if v == 0 else np.inf)
    return total


def cross_validate_ranks(dataset, grid, holdout_fraction=0.1, n_repeats=3, seed=0,
                         method=None, opts=None, tie_tol=1e-8):
    """Pick ``(Q_b, Q_w)`` from ``grid`` by imputing MCAR-held-out observed cells.

    The winner minimizes the mean standardized score.  Scores within
    ``tie_tol`` of the minimum count as ties, which go to the smaller
    ``Q_b + Q_w``, then the smaller ``Q_b``, then the earlier grid entry.
    """
    grid = [(int(a), int(b)) for a, b in grid]
    if not grid:
        raise InvalidConfig("rank grid is empty")
    if not 0 < holdout_fraction <= 0.5:
        raise InvalidConfig("holdout_fraction must lie in (0, 0.5]")
    if n_repeats < 1:
        raise InvalidConfig("n_repeats must be at least 1")
    opts = opts or ImputationOptions()
    fn = _method_for(dataset, method)
    scores = np.empty((n_repeats, len(grid)))
    for r in range(n_repeats):
        mask_seed = int(np.random.SeedSequence([seed, r]).generate_state(1)[0])
        held = apply_mcar_mask(dataset, holdout_fraction, mask_seed)
        delta = dataset.mask & ~held.mask
        reference = impute_mean_proportion(held)
        for g, (qb, qw) in enumerate(grid):
            res = fn(held, qb, qw, opts)
            scores[r, g] = standardized_score(res, reference, dataset, delta)
    mean = scores.mean(axis=0)
    tied = [g for g in range(len(grid)) if mean[g] <= mean.min() + tie_tol]
    best = min(tied, key=lambda g: (sum(grid[g]), grid[g][0], g))
    return CVResult(grid[best][0], grid[best][1], grid, scores)
