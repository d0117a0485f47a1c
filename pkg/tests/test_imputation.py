import numpy as np
import pytest

from mlimpute.data import MixedDataset
from mlimpute.errors import EmptyCategory, EmptyColumn, EmptyGroup
from mlimpute.imputation import ImputationOptions, impute_mlfamd, impute_mlmca, impute_mlpca
from oracles import iterative_pca_impute, multilevel_data

NOREG = ImputationOptions(regularize=False)


def _quant(Y, groups):
    return MixedDataset.from_arrays(Y, groups=groups)


def _masked(rng, Y, frac):
    Y = Y.copy()
    drop = rng.random(Y.shape) < frac
    drop[0] = False
    Y[drop] = np.nan
    return Y


def test_complete_input_unchanged():
    rng = np.random.default_rng(0)
    Y = rng.standard_normal((12, 4))
    res = impute_mlpca(_quant(Y, np.arange(12) % 3), 1, 1)
    assert res.iterations == 1 and res.converged
    assert np.array_equal(res.completed.quantitative, Y)


@pytest.mark.parametrize("seed", range(3))
def test_noiseless_single_cell_recovery(seed):
    rng = np.random.default_rng(seed)
    Y, g = multilevel_data(rng, [10, 12, 9, 11], 6, 2, 2)
    i, j = rng.integers(len(Y)), rng.integers(6)
    Ym = Y.copy()
    Ym[i, j] = np.nan
    opts = ImputationOptions(regularize=False, tol=1e-12, max_iter=5000, svd_tol=1e-13)
    res = impute_mlpca(_quant(Ym, g), 2, 2, opts)
    assert abs(res.completed.quantitative[i, j] - Y[i, j]) <= 1e-6


def test_mlmca_deterministic_dependence():
    rng = np.random.default_rng(1)
    n = 60
    a = rng.integers(0, 3, n)
    b = (a + 1) % 3  # b is a function of a
    c = rng.integers(0, 2, n)
    cats = np.column_stack([a, b, c]).astype(str)
    groups = np.arange(n) % 3
    ds = MixedDataset.from_arrays(categorical=cats, groups=groups)
    truth = ds.categorical[5, 1]
    cat = ds.categorical.copy()
    cat[5, 1] = -1
    res = impute_mlmca(ds.with_values(categorical=cat), 1, 2)
    assert res.completed.categorical[5, 1] == truth
    assert abs(res.fuzzy_memberships[(5, 1)].sum() - 1) <= 1e-8


def _mixed(rng, n=45, K=3, frac=0.15, quant=True, cat=True):
    Y, g = multilevel_data(rng, [n // K] * K, 4, 1, 2, noise=0.3)
    q = Y[:, :2] if quant else None
    c = None
    if cat:
        c = np.column_stack([np.digitize(Y[:, 2], np.quantile(Y[:, 2], [1 / 3, 2 / 3])),
                             (Y[:, 3] > np.median(Y[:, 3])).astype(int)]).astype(str)
    ds = MixedDataset.from_arrays(q, c, groups=g)
    drop = rng.random((ds.n, len(ds.features))) < frac
    drop[:6] = False
    return ds, ds.masked(drop)


def _block_sums(X, p_q, n_categories):
    out, start = [], p_q
    for c in n_categories:
        out.append(X[:, start:start + c].sum(axis=1))
        start += c
    return np.column_stack(out)


@pytest.mark.parametrize("fn,kw", [(impute_mlmca, dict(quant=False)), (impute_mlfamd, {})])
def test_fuzzy_row_sums_every_iteration(fn, kw):
    rng = np.random.default_rng(2)
    _, ds = _mixed(rng, **kw)
    p_q = len(ds.quantitative_columns)
    seen = []

    def check(it, X):
        seen.append(it)
        assert np.abs(_block_sums(X, p_q, ds.n_categories) - 1).max() <= 1e-8

    res = fn(ds, 1, 2, callback=check)
    assert seen == list(range(1, res.iterations + 1))
    for v in res.fuzzy_memberships.values():
        assert abs(v.sum() - 1) <= 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_observed_cells_never_modified(seed):
    rng = np.random.default_rng(seed)
    _, ds = _mixed(rng)
    X0 = np.hstack([ds.quantitative, np.zeros((ds.n, 0))])
    qmask = ds.quantitative_mask

    def check(it, X):
        assert np.array_equal(X[:, :2][qmask], X0[qmask])

    res = impute_mlfamd(ds, 1, 2, callback=check)
    assert np.array_equal(res.completed.quantitative[qmask], ds.quantitative[qmask])
    cmask = ds.categorical_mask
    assert np.array_equal(res.completed.categorical[cmask], ds.categorical[cmask])
    assert res.completed.is_complete


def test_mlfamd_quantitative_reduction():
    rng = np.random.default_rng(3)
    _, ds = _mixed(rng, cat=False)
    a = impute_mlfamd(ds, 1, 1)
    b = impute_mlpca(ds, 1, 1, scale=True)
    assert a.iterations == b.iterations
    np.testing.assert_array_equal(a.completed.quantitative, b.completed.quantitative)
    assert a.objective_trace == b.objective_trace


def test_mlfamd_categorical_reduction():
    rng = np.random.default_rng(4)
    _, ds = _mixed(rng, quant=False)
    a = impute_mlfamd(ds, 1, 2)
    b = impute_mlmca(ds, 1, 2)
    assert a.iterations == b.iterations
    np.testing.assert_array_equal(a.completed.categorical, b.completed.categorical)
    for key, v in a.fuzzy_memberships.items():
        np.testing.assert_array_equal(v, b.fuzzy_memberships[key])


@pytest.mark.parametrize("seed", range(5))
def test_em_monotone_without_regularization(seed):
    rng = np.random.default_rng(seed)
    Y, g = multilevel_data(rng, [8, 10, 12], 5, 1, 2, noise=0.5)
    ds = _quant(_masked(rng, Y, 0.2), g)
    res = impute_mlpca(ds, 1, 2, NOREG)
    t = np.array(res.objective_trace)
    assert np.all(np.diff(t) <= 1e-10)


def test_row_permutation_within_group_and_column_permutation():
    rng = np.random.default_rng(5)
    Y, g = multilevel_data(rng, [8, 10, 12], 5, 1, 2, noise=0.5)
    Ym = _masked(rng, Y, 0.2)
    base = impute_mlpca(_quant(Ym, g), 1, 2).completed.quantitative
    rows = np.concatenate([rng.permutation(np.flatnonzero(g == k)) for k in range(3)])
    cols = rng.permutation(5)
    perm = impute_mlpca(_quant(Ym[rows][:, cols], g[rows]), 1, 2).completed.quantitative
    np.testing.assert_allclose(perm, base[rows][:, cols], atol=1e-8)


def test_group_relabel_invariance():
    rng = np.random.default_rng(6)
    Y, g = multilevel_data(rng, [8, 10, 12], 5, 1, 2, noise=0.5)
    Ym = _masked(rng, Y, 0.2)
    a = impute_mlpca(_quant(Ym, g), 1, 2).completed.quantitative
    names = np.array(["zeta", "alpha", "mid"])[g]
    b = impute_mlpca(_quant(Ym, names), 1, 2).completed.quantitative
    np.testing.assert_allclose(a, b, atol=1e-8)


@pytest.mark.parametrize("regularize", [False, True])
@pytest.mark.parametrize("seed", range(3))
def test_single_group_matches_plain_iterative_pca(seed, regularize):
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((25, 2)) @ rng.standard_normal((2, 6)) + 0.3 * rng.standard_normal((25, 6))
    Ym = _masked(rng, Y, 0.15)
    opts = ImputationOptions(regularize=regularize, tol=1e-10, svd_tol=1e-13)
    res = impute_mlpca(_quant(Ym, None), 0, 2, opts)
    ref, it = iterative_pca_impute(Ym, 2, regularize=regularize, tol=1e-10)
    assert res.iterations == it
    assert np.abs(res.completed.quantitative - ref).max() <= 1e-8


def test_errors():
    Y = np.arange(12.0).reshape(6, 2)
    Y[:, 0] = np.nan
    with pytest.raises(EmptyColumn):
        impute_mlpca(_quant(Y, None), 0, 1)
    Y = np.arange(12.0).reshape(6, 2)
    Y[:2] = np.nan
    with pytest.raises(EmptyGroup):
        impute_mlpca(_quant(Y, [0, 0, 1, 1, 1, 1]), 0, 1)
    cats = np.array([["a"], ["b"], ["a"], ["b"]], dtype=object)
    ds = MixedDataset.from_arrays(categorical=cats, categories=[("a", "b", "c")])
    cat = ds.categorical.copy()
    cat[0] = -1
    with pytest.raises(EmptyCategory):
        impute_mlmca(ds.with_values(categorical=cat), 0, 1)


def test_nonconvergence_is_flagged_not_raised():
    rng = np.random.default_rng(7)
    Y, g = multilevel_data(rng, [8, 10, 12], 5, 1, 2, noise=0.5)
    res = impute_mlpca(_quant(_masked(rng, Y, 0.3), g), 1, 2, ImputationOptions(max_iter=2))
    assert res.iterations == 2 and not res.converged
