"""Run complete sessions (master plus worker threads) and audit their traffic."""

import threading
from dataclasses import dataclass, field

import numpy as np

from ..errors import MLImputeError
from ..imputation import working_matrix
from .master import Master, _site_key
from .transport import in_process_bus, tcp_connect, tcp_line_transport
from .worker import WorkerSite

TRANSPORTS = ("inproc", "tcp")


class Tap:
    """Thread-safe recorder of every message seen by the master endpoint."""

    def __init__(self):
        self.records = []
        self._lock = threading.Lock()

    def __call__(self, direction, index, msg):
        with self._lock:
            self.records.append((direction, index, msg))

    def count(self, kinds=None, direction=None):
        return sum(1 for d, _, m in self.records
                   if (kinds is None or m.kind in kinds) and (direction is None or d == direction))


def run_session(site_data, drive, transport="inproc", tap=None, site_ids=None, method="",
                timeout=120.0, worker_factory=WorkerSite):
    """Start one worker thread per site, run ``drive(master)`` and shut down.

    Returns ``(drive_result, workers)`` with workers in site-id order.
    """
    if transport not in TRANSPORTS:
        raise ValueError(f"transport must be one of {TRANSPORTS}")
    K = len(site_data)
    site_ids = list(range(K)) if site_ids is None else list(site_ids)
    workers = [worker_factory(site_ids[i], site_data[i], None, method) for i in range(K)]
    errors = [None] * K
    if transport == "inproc":
        endpoint, links = in_process_bus(K, tap, timeout)
        listener = None
    else:
        listener = tcp_line_transport(("127.0.0.1", 0), K, tap, timeout)
        links = [None] * K

    def serve(i):
        link = links[i]
        try:
            if link is None:
                link = tcp_connect(listener.address, timeout)
            workers[i].link = link
            workers[i].run()
        except Exception as exc:  # reported after the master finishes
            errors[i] = exc
        finally:
            if link is not None:
                link.close()

    threads = [threading.Thread(target=serve, args=(i,), daemon=True) for i in range(K)]
    for t in threads:
        t.start()
    if listener is not None:
        endpoint = listener.accept(timeout)
    master = Master(endpoint)
    try:
        master.handshake()
        out = drive(master)
        master.shutdown()
    except MLImputeError as exc:
        master.abort(exc)
        raise
    finally:
        for t in threads:
            t.join(timeout)
        endpoint.close()
    for err in errors:
        if err is not None:
            raise err
    workers.sort(key=lambda w: _site_key(w.site_id))
    return out, workers


@dataclass
class SiteSvd:
    left_vectors: list
    singular_values: np.ndarray
    right_vectors: np.ndarray
    converged: tuple
    iterations: list = field(default_factory=list)


def distributed_rank_q_svd(blocks, Q, seed=0, tol=1e-9, max_iter=1000, transport="inproc",
                           tap=None, site_ids=None, start=None):
    """Rank-``Q`` SVD of row blocks held by separate sites.

    Matches ``truncated_svd(vstack(blocks), Q, refine=False, strict=False)``.
    Left vectors come back per site; components beyond the numerical rank get
    zero left vectors.
    """
    res, workers = run_session(
        blocks, lambda m: m.rank_q_svd(Q, seed, tol, max_iter, start), transport, tap,
        site_ids)
    return SiteSvd([w.left_vectors() for w in workers], res.singular_values,
                   res.right_vectors, res.converged, res.iterations)


def distributed_power_method(blocks, seed=0, tol=1e-9, max_iter=1000, transport="inproc",
                             tap=None, site_ids=None):
    """Leading singular triplet of the stacked blocks: ``(per-site q_k, sigma, v)``."""
    r = distributed_rank_q_svd(blocks, 1, seed, tol, max_iter, transport, tap, site_ids)
    return [u[:, 0] for u in r.left_vectors], float(r.singular_values[0]), r.right_vectors[:, 0]


def distributed_impute(datasets, method, Q_b, Q_w, opts=None, transport="inproc", tap=None,
                       site_ids=None, worker_factory=WorkerSite):
    """Multilevel imputation with one site per dataset (each site is one group).

    Returns ``(per-site results in site-id order, master run summary)``.
    """
    run, workers = run_session(datasets, lambda m: m.impute(method, Q_b, Q_w, opts),
                               transport, tap, site_ids, method,
                               worker_factory=worker_factory)
    results = []
    for w in workers:
        w.result.objective_trace = list(run.objective_trace)
        results.append(w.result)
    return results, run


# -- privacy audit ---------------------------------------------------------

def _vectors(obj, skip):
    if isinstance(obj, dict):
        for k, v in obj.items():
            if k not in skip:
                yield from _vectors(v, skip)
    elif isinstance(obj, (list, tuple, np.ndarray)):
        arr = np.asarray(obj)
        if arr.dtype.kind in "iuf":
            yield arr.astype(float).ravel()
        else:
            for v in obj:
                yield from _vectors(v, skip)
    elif isinstance(obj, (int, float, np.generic)) and not isinstance(obj, bool):
        yield np.array([float(obj)])


def _matching_rows(M, v, rtol=1e-12):
    """Rows of ``M`` equal to ``v`` on their finite entries (at least two of them)."""
    ok = np.isfinite(M)
    with np.errstate(invalid="ignore"):
        close = np.abs(M - v) <= rtol * (1 + np.abs(M))
    return np.all(close | ~ok, axis=1) & (ok.sum(axis=1) >= 2)


def check_privacy(records, site_matrices, allowed_lengths, skip_keys=("layout", "site_id")):
    """Return a list of violations found in tapped traffic.

    A violation is a payload vector whose length is not allowed, that equals a
    raw row of some site, or that has a site's row count and equals one of that
    site's raw columns.  ``site_matrices`` hold raw values with NaN at missing
    cells.
    """
    allowed = set(int(a) for a in allowed_lengths) | {1}
    mats = [np.asarray(m, dtype=float) for m in site_matrices]
    found = []
    for direction, index, msg in records:
        for v in _vectors(msg.payload, set(skip_keys)):
            where = f"{direction} {msg.kind} r{msg.round} c{msg.component}"
            if len(v) not in allowed:
                found.append(f"{where}: vector of length {len(v)}")
            for s, M in enumerate(mats):
                if len(v) == M.shape[1] and _matching_rows(M, v).any():
                    found.append(f"{where}: equals a raw row of site {s}")
                if len(v) == M.shape[0] and _matching_rows(M.T, v).any():
                    found.append(f"{where}: equals a raw column of site {s}")
    return found


def raw_site_matrices(datasets):
    """Raw working matrices (quantitative columns then indicators, NaN when missing)."""
    return [working_matrix(d)[0] for d in datasets]
