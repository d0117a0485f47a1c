import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlimpute.benchmark import SimulationConfig, apply_mcar_mask, generate_multilevel_data
from mlimpute.data import MixedDataset
from mlimpute.distributed import (KINDS, Message, Tap, WorkerSite, check_privacy, decode,
                                  distributed_impute, distributed_power_method,
                                  distributed_rank_q_svd, encode, raw_site_matrices)
from mlimpute.distributed.protocol import BROADCAST_NORM, BROADCAST_R, POWER_NORM, POWER_R
from mlimpute.errors import MalformedMessage, ProtocolViolation, SchemaMismatch
from mlimpute.imputation import ImputationOptions, impute_mlfamd, impute_mlmca, impute_mlpca
from mlimpute.linalg import power_method, start_vector, truncated_svd

SAMPLE_PAYLOADS = {
    "HELLO": {"site_id": 3, "n_k": 10, "schema_hash": "abc"},
    "STATS": {"sums": [1.5, -2.0], "n": 4},
    "BROADCAST_STATS": {"op": "fit", "means": [0.1, 0.2]},
    "POWER_R": {"r": [0.1, 1e-300, -3.25]},
    "BROADCAST_R": {"v": [1.0, 0.0]},
    "POWER_NORM": {"sq": 2.5},
    "BROADCAST_NORM": {"sigma": 1.5811388300841898},
    "COMPONENT_DONE": {"sigma": 2.0, "v": [0.6, 0.8], "sign": -1.0, "null": False},
    "ROUND_DONE": {"final": True},
    "SHUTDOWN": {},
}


def _split(A, K):
    return np.array_split(A, K)


# -- protocol -----------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_round_trip_each_kind(kind):
    msg = Message(kind, 4, 2, SAMPLE_PAYLOADS[kind])
    line = encode(msg)
    assert line.endswith(b"\n") and line.count(b"\n") == 1
    assert decode(line) == msg


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), max_size=20),
       st.integers(0, 10 ** 6), st.integers(0, 50))
def test_round_trip_random_payloads(values, rnd, comp):
    msg = Message("POWER_R", rnd, comp, {"r": np.array(values)})
    back = decode(encode(msg))
    assert back.round == rnd and back.component == comp
    assert back.payload["r"] == values  # exact, shortest round-trip floats


def test_malformed_line_offset():
    line = b'{"kind":"POWER_R","round":1,"component":0,"payload":{"r":[1.0,}}\n'
    with pytest.raises(MalformedMessage) as exc:
        decode(line)
    assert exc.value.offset == line.index(b",}") + 1
    with pytest.raises(MalformedMessage) as exc:
        decode(b'{"kind":"NOPE","round":0,"component":0,"payload":{}}')
    assert exc.value.offset == 1
    with pytest.raises(MalformedMessage):
        decode(b'{"kind":"POWER_R","round":0,"component":0,"payload":{}}')
    with pytest.raises(MalformedMessage):
        decode(b'{"kind":"SHUTDOWN","round":-1,"component":0,"payload":{}}')


# -- SVD ----------------------------------------------------------------------

def test_power_method_k1_equals_centralized():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((7, 4))
    q, sigma, v = distributed_power_method([A], seed=3)
    q0 = A @ start_vector(3, 0, 0, 4)
    u, s, w = power_method(A, q0 / np.linalg.norm(q0))
    assert sigma == s
    np.testing.assert_array_equal(v * np.sign(v[0]), w * np.sign(w[0]))
    np.testing.assert_allclose(np.abs(q[0]), np.abs(u), atol=1e-12)


def test_rank_q_12x5_three_sites():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((12, 5))
    res = distributed_rank_q_svd(_split(A, 3), 3, seed=0)
    ref = truncated_svd(A, 3)
    assert np.abs(res.singular_values - ref.singular_values).max() <= 1e-10
    assert all(u.shape == (4, 3) for u in res.left_vectors)


def test_full_rank_reconstruction_per_site():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((12, 4))
    res = distributed_rank_q_svd(_split(A, 3), 4)
    for block, U in zip(_split(A, 3), res.left_vectors):
        rec = (U * res.singular_values) @ res.right_vectors.T
        assert np.linalg.norm(rec - block) <= 1e-8 * np.linalg.norm(A)


def test_registration_order_does_not_matter():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((15, 5))
    blocks = _split(A, 3)
    a = distributed_rank_q_svd(blocks, 2, site_ids=[0, 1, 2])
    b = distributed_rank_q_svd([blocks[2], blocks[0], blocks[1]], 2, site_ids=[2, 0, 1])
    np.testing.assert_array_equal(a.singular_values, b.singular_values)
    np.testing.assert_array_equal(a.right_vectors, b.right_vectors)
    for x, y in zip(a.left_vectors, b.left_vectors):
        np.testing.assert_array_equal(x, y)


def test_rank_deficient_gets_zero_left_vectors():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((9, 2)) @ rng.standard_normal((2, 5))
    res = distributed_rank_q_svd(_split(A, 3), 4)
    ref = truncated_svd(A, 4, refine=False, strict=False)
    np.testing.assert_allclose(res.singular_values, ref.singular_values, atol=1e-10)
    for U in res.left_vectors:
        assert np.all(U[:, 2:] == 0)


@pytest.mark.parametrize("K", [1, 3])
def test_message_complexity(K):
    rng = np.random.default_rng(5)
    A = rng.standard_normal((12, 4))
    tap = Tap()
    res = distributed_rank_q_svd(_split(A, K), 2, tap=tap)
    steps = sum(it + 1 for it in res.iterations)  # the start step counts as one iteration
    assert tap.count({POWER_R, POWER_NORM}, "to_master") == 2 * K * steps
    assert tap.count({BROADCAST_R, BROADCAST_NORM}, "broadcast") == 2 * steps
    assert not tap.count({BROADCAST_R, POWER_R}, "to_worker")


def test_tcp_transport_matches_inproc():
    rng = np.random.default_rng(6)
    A = rng.standard_normal((10, 4))
    a = distributed_rank_q_svd(_split(A, 2), 3, transport="inproc")
    b = distributed_rank_q_svd(_split(A, 2), 3, transport="tcp")
    np.testing.assert_array_equal(a.singular_values, b.singular_values)
    np.testing.assert_array_equal(a.right_vectors, b.right_vectors)


# -- imputation ---------------------------------------------------------------

def _sites(cfg, frac, seed=0):
    ds, _ = generate_multilevel_data(cfg, seed)
    ds = apply_mcar_mask(ds, frac, seed + 1)
    return [ds.subset(ds.groups.rows(k)) for k in range(cfg.K)], ds


def _centralized(fn, full, Q_b, Q_w, opts):
    return fn(full, Q_b, Q_w, opts)


@pytest.mark.parametrize("method,fn,p_q,p_c", [
    ("mlpca", impute_mlpca, 5, 0),
    ("mlmca", impute_mlmca, 0, 3),
    ("mlfamd", impute_mlfamd, 3, 2),
])
def test_distributed_impute_matches_centralized(method, fn, p_q, p_c):
    cfg = SimulationConfig(K=3, n_k=12, p_q=p_q, p_c=p_c, q_between=1, q_within=1,
                           noise=0.5)
    sites, full = _sites(cfg, 0.1)
    opts = ImputationOptions(seed=2)
    tap = Tap()
    results, run = distributed_impute(sites, method, 1, 1, opts, tap=tap)
    ref = fn(full, 1, 1, opts)
    assert run.iterations == ref.iterations
    quant = np.vstack([r.completed.quantitative for r in results])
    cat = np.vstack([r.completed.categorical for r in results])
    assert np.abs(quant - ref.completed.quantitative).max(initial=0) <= 1e-8
    assert np.array_equal(cat, ref.completed.categorical)
    offsets = np.cumsum([0] + [s.n for s in sites])
    for k, r in enumerate(results):
        for (i, j), v in r.fuzzy_memberships.items():
            assert np.abs(v - ref.fuzzy_memberships[(i + offsets[k], j)]).max() <= 1e-8
    P = p_q + 3 * p_c
    assert check_privacy(tap.records, raw_site_matrices(sites), {P, 1, 2}) == []


def test_distributed_impute_single_site_exact():
    cfg = SimulationConfig(K=1, n_k=20, p_q=4, q_between=0, q_within=2)
    sites, full = _sites(cfg, 0.1)
    results, _ = distributed_impute(sites, "mlpca", 0, 2)
    ref = impute_mlpca(full, 0, 2)
    np.testing.assert_allclose(results[0].completed.quantitative, ref.completed.quantitative,
                               rtol=0, atol=1e-12)


@pytest.mark.slow
def test_default_simulation_five_sites():
    cfg = SimulationConfig()
    sites, full = _sites(cfg, cfg.missing_fraction, seed=7)
    tap = Tap()
    results, _ = distributed_impute(sites, "mlpca", 2, 2, tap=tap)
    ref = impute_mlpca(full, 2, 2)
    quant = np.vstack([r.completed.quantitative for r in results])
    assert np.abs(quant - ref.completed.quantitative).max() <= 1e-8
    assert check_privacy(tap.records, raw_site_matrices(sites), {10, 2, 1}) == []


def test_schema_mismatch_between_sites():
    a = MixedDataset.from_arrays(np.ones((3, 2)) + np.eye(3, 2))
    b = MixedDataset.from_arrays(np.ones((3, 2)) + np.eye(3, 2), quantitative_names=["x", "y"])
    with pytest.raises(SchemaMismatch):
        distributed_impute([a, b], "mlpca", 0, 1)


class ShortR(WorkerSite):
    def local_r(self):
        return super().local_r()[:-1]


def test_wrong_length_r_aborts_cleanly():
    cfg = SimulationConfig(K=3, n_k=10, p_q=4, q_between=1, q_within=1)
    sites, _ = _sites(cfg, 0.1)

    def factory(site_id, data, link, method):
        cls = ShortR if site_id == 1 else WorkerSite
        return cls(site_id, data, link, method)

    with pytest.raises(ProtocolViolation) as exc:
        distributed_impute(sites, "mlpca", 1, 1, worker_factory=factory)
    assert exc.value.kind == POWER_R


# -- privacy checker ----------------------------------------------------------

def test_privacy_checker_flags_leaks():
    M = np.arange(12.0).reshape(4, 3) + 0.5
    leak_row = Message("STATS", 0, 0, {"x": M[2]})
    leak_col = Message("STATS", 0, 0, {"x": M[:, 1]})
    fine = Message("STATS", 0, 0, {"x": M.sum(axis=0), "n": 4})
    recs = [("to_master", 0, m) for m in (leak_row, leak_col, fine)]
    found = check_privacy(recs, [M], {3})
    assert len(found) == 3  # the row, plus the column (bad length and raw match)
    assert check_privacy(recs[2:], [M], {3}) == []


def test_wire_floats_survive_json_exactly():
    x = [math.pi, 1 / 3, 2.0 ** -1074, 1.7976931348623157e308]
    assert json.loads(encode(Message("POWER_R", 0, 0, {"r": x})))["payload"]["r"] == x


def test_site_ids_sort_numerically():
    from mlimpute.distributed.master import _site_key
    ids = ["10", "2", "b", 3, "a", "0"]
    assert sorted(ids, key=_site_key) == ["0", "2", 3, "10", "a", "b"]
