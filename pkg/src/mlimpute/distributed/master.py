"""Master side: aggregates site summaries and drives every iteration.

The master replays :func:`mlimpute.linalg.truncated_svd` (unrefined,
non-strict) step by step, so a distributed run reproduces the central one up
to floating-point summation order.  Contributions are always summed in
site-id order.
"""

from dataclasses import dataclass, field

import numpy as np

from ..data import GroupStructure
from ..errors import (EmptyGroup, MLImputeError, ProtocolViolation, SchemaMismatch)
from ..imputation import ImputationOptions, Layout, fill_values
from ..linalg import (DEFAULT_MAX_ITER, DEFAULT_TOL, NULL_RTOL, START_ATTEMPTS,
                      complete_basis, converged_residual, fix_sign, shrink_from_total,
                      start_vector)
from ..multilevel import check_ranks, fit_level
from .protocol import (BROADCAST_NORM, BROADCAST_R, BROADCAST_STATS, COMPONENT_DONE,
                       HELLO, POWER_NORM, POWER_R, ROUND_DONE, SHUTDOWN, STATS, Message)
from .worker import matrix_hash

_EPS = 1e-12
METHOD_NAMES = ("mlpca", "mlmca", "mlfamd")


@dataclass
class DistributedSvd:
    singular_values: np.ndarray
    right_vectors: np.ndarray
    converged: tuple
    iterations: list = field(default_factory=list)


@dataclass
class DistributedRun:
    iterations: int
    converged: bool
    objective_trace: list
    between_loadings: np.ndarray = None
    within_loadings: np.ndarray = None
    within_singular_values: np.ndarray = None


class Master:
    def __init__(self, endpoint):
        self.ep = endpoint
        self.sites = []
        self.sizes = np.zeros(0, dtype=int)
        self.layout = None

    @property
    def K(self):
        return self.ep.n

    # -- messaging ----------------------------------------------------------

    def _gather(self, kind, rnd, comp, check=None):
        """One message of ``kind`` from every site, in site order."""
        out = []
        for i in range(self.K):
            msg = self.ep.recv(i)
            if msg.kind != kind:
                raise ProtocolViolation(msg.kind, msg.round, f"expected {kind} from site {i}")
            if (msg.round, msg.component) != (rnd, comp):
                raise ProtocolViolation(kind, msg.round,
                                        f"site {i} sent round/component "
                                        f"{msg.round}/{msg.component}, expected {rnd}/{comp}")
            if check:
                check(i, msg)
            out.append(msg)
        return out

    def _vector(self, msg, key, length):
        try:
            v = np.asarray(msg.payload[key], dtype=float)
        except (TypeError, ValueError):
            raise ProtocolViolation(msg.kind, msg.round, f"{key} is not numeric") from None
        if v.shape != (length,):
            raise ProtocolViolation(msg.kind, msg.round,
                                    f"{key} has shape {v.shape}, expected ({length},)")
        return v

    def _scalar(self, msg, key):
        v = msg.payload[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ProtocolViolation(msg.kind, msg.round, f"{key} must be a number")
        return float(v)

    def _sum_vectors(self, kind, key, length, rnd, comp):
        msgs = self._gather(kind, rnd, comp)
        total = np.zeros(length)
        for m in msgs:
            total = total + self._vector(m, key, length)
        return total

    def _sum_scalars(self, kind, key, rnd, comp):
        total = 0.0
        for m in self._gather(kind, rnd, comp):
            total += self._scalar(m, key)
        return total

    def abort(self, exc):
        try:
            err = exc.to_dict() if isinstance(exc, MLImputeError) else {"message": str(exc)}
            self.ep.broadcast(Message(SHUTDOWN, 0, 0, {"error": err}))
        except MLImputeError:
            pass

    def shutdown(self):
        self.ep.broadcast(Message(SHUTDOWN, 0, 0, {}))

    # -- handshake ----------------------------------------------------------

    def handshake(self):
        hellos = []
        for i in range(self.K):
            msg = self.ep.recv(i)
            if msg.kind != HELLO:
                raise ProtocolViolation(msg.kind, msg.round, "expected HELLO")
            hellos.append(msg.payload)
        ids = [h["site_id"] for h in hellos]
        if len(set(map(str, ids))) != len(ids):
            raise ProtocolViolation(HELLO, 0, "duplicate site ids")
        order = sorted(range(self.K), key=lambda i: _site_key(ids[i]))
        self.ep.reorder(order)
        hellos = [hellos[i] for i in order]
        if len({h["schema_hash"] for h in hellos}) != 1:
            raise SchemaMismatch("sites disagree on the column schema")
        self.sites = [h["site_id"] for h in hellos]
        self.sizes = np.array([int(h["n_k"]) for h in hellos])
        self.hello = hellos[0]
        return self.sites

    # -- distributed SVD ----------------------------------------------------

    def _rank_q(self, Q, p, seed, tol, max_iter, start=None, rnd=0):
        """Replay of the unrefined truncated SVD on the stacked site matrices."""
        S = np.zeros(Q)
        V = np.zeros((p, Q))
        ok, iters = [], []
        sigma_lead = 0.0
        exhausted = False
        for i in range(Q):
            q_norm = None
            if not exhausted:
                for attempt in range(START_ATTEMPTS):
                    if attempt == 0 and start is not None and i < start.shape[1]:
                        g = start[:, i]
                    else:
                        g = start_vector(seed, i, attempt, p)
                    self.ep.broadcast(Message(BROADCAST_R, rnd, i, {"v": g}))
                    qn = np.sqrt(self._sum_scalars(POWER_NORM, "sq", rnd, i))
                    if not (qn == 0.0 or qn <= NULL_RTOL * sigma_lead * np.linalg.norm(g)):
                        q_norm = qn
                        break
            if q_norm is None:
                exhausted = True
                V[:, i] = complete_basis(V[:, :i], p, seed, i)
                self.ep.broadcast(Message(COMPONENT_DONE, rnd, i, {
                    "sigma": 0.0, "v": V[:, i], "sign": 1.0, "null": True}))
                ok.append(True)
                iters.append(0)
                continue
            self.ep.broadcast(Message(BROADCAST_NORM, rnd, i, {"sigma": q_norm}))
            sigma, v, sign, conv, n_it = self._iterate(i, p, tol, max_iter, rnd)
            S[i], V[:, i] = sigma, v
            ok.append(conv)
            iters.append(n_it)
            if i == 0:
                sigma_lead = sigma
            self.ep.broadcast(Message(COMPONENT_DONE, rnd, i, {
                "sigma": sigma, "v": v, "sign": sign, "null": False}))
        return DistributedSvd(S, V, tuple(ok), iters)

    def _iterate(self, i, p, tol, max_iter, rnd):
        sigma, v = 0.0, None
        for it in range(max_iter + 1):
            z = self._sum_vectors(POWER_R, "r", p, rnd, i)
            if v is not None and converged_residual(z, sigma, v, tol):
                s = fix_sign(v)
                return sigma, s * v, s, True, it
            if it == max_iter:
                break
            zn = np.linalg.norm(z)
            if zn == 0.0:
                return 0.0, z, 1.0, False, it
            v = z / zn
            self.ep.broadcast(Message(BROADCAST_R, rnd, i, {"v": v}))
            sigma = np.sqrt(self._sum_scalars(POWER_NORM, "sq", rnd, i))
            self.ep.broadcast(Message(BROADCAST_NORM, rnd, i, {"sigma": sigma}))
        s = fix_sign(v)
        return sigma, s * v, s, False, max_iter

    def rank_q_svd(self, Q, seed=0, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, start=None):
        """Rank-``Q`` SVD of the row-stacked site matrices; left vectors stay at the sites."""
        p = int(self.hello["layout"]["p"])
        if self.hello["schema_hash"] != matrix_hash(p):
            raise SchemaMismatch("sites do not hold plain matrices")
        if Q < 0 or Q > min(int(self.sizes.sum()), p):
            raise ProtocolViolation(BROADCAST_STATS, 0, f"Q={Q} out of range")
        self.ep.broadcast(Message(BROADCAST_STATS, 0, 0, {"op": "svd"}))
        return self._rank_q(Q, p, seed, tol, max_iter, start)

    def power_method(self, seed=0, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
        """Leading singular triplet; equals ``rank_q_svd`` with ``Q = 1``."""
        return self.rank_q_svd(1, seed, tol, max_iter)

    # -- distributed imputation --------------------------------------------

    def _layout(self, method):
        lay = self.hello.get("layout", {})
        if "p_q" not in lay:
            raise SchemaMismatch("sites do not hold datasets")
        layout = Layout(int(lay["p_q"]), tuple(int(c) for c in lay["n_categories"]),
                        method != "mlpca", tuple(lay.get("names", ())))
        if method == "mlpca" and (layout.p_c or not layout.p_q):
            raise SchemaMismatch("mlpca needs quantitative data")
        if method == "mlmca" and (layout.p_q or not layout.p_c):
            raise SchemaMismatch("mlmca needs categorical data")
        if method not in METHOD_NAMES:
            raise SchemaMismatch(f"unknown method {method!r}")
        return layout

    def impute(self, method, Q_b, Q_w, opts=None):
        """Iterative multilevel imputation; each site imputes its own cells."""
        opts = opts or ImputationOptions()
        settings = opts.svd_settings()
        layout = self._layout(method)
        self.layout = layout
        P, K = layout.P, self.K
        sizes = self.sizes
        groups = GroupStructure(np.repeat(np.arange(K), sizes))
        check_ranks(groups, Q_b, Q_w, layout.rank_dim)

        self.ep.broadcast(Message(BROADCAST_STATS, 0, 0, {"op": "init"}))
        msgs = self._gather(STATS, 0, 0)
        sums = np.zeros(P)
        counts = np.zeros(P)
        for k, m in enumerate(msgs):
            c = self._vector(m, "obs_counts", P)
            if c.sum() == 0:
                raise EmptyGroup(f"site {self.sites[k]!r} has no observed value")
            sums = sums + self._vector(m, "obs_sums", P)
            counts = counts + c
        fill = fill_values(sums, counts, layout)
        self.ep.broadcast(Message(BROADCAST_STATS, 0, 0, {"op": "fill", "fill": fill}))

        n = int(sizes.sum())
        sq = np.sqrt(sizes)
        starts = (None, None)
        trace = []
        converged = False
        it = 0
        between_V = within = None
        for it in range(1, opts.max_iter + 1):
            self.ep.broadcast(Message(BROADCAST_STATS, it, 0, {"op": "stats"}))
            msgs = self._gather(STATS, it, 0)
            col_sums = np.vstack([self._vector(m, "col_sums", P) for m in msgs])
            col_css = np.vstack([self._vector(m, "col_css", P) for m in msgs])
            for k, m in enumerate(msgs):
                if int(m.payload.get("n_k", -1)) != sizes[k]:
                    raise ProtocolViolation(STATS, it, f"site {k} changed its row count")
            means = col_sums.sum(axis=0) / n
            site_means = col_sums / sizes[:, None]
            ss = col_css.sum(axis=0) + sizes @ (site_means - means) ** 2
            std = np.sqrt(ss[:layout.p_q] / n)
            w = layout.weights(means, std, n)
            G = (site_means - means) * w
            offset = sizes @ G / n
            between = fit_level((G - offset) * sq[:, None], Q_b, min(K - 1, layout.rank_dim),
                                opts.regularize, settings, 0, starts[0])

            self.ep.broadcast(Message(BROADCAST_STATS, it, 0,
                                      {"op": "fit", "mean": means, "weights": w}))
            within = self._rank_q(Q_w, P, settings.seed + 1, settings.tol,
                                  settings.max_iter, starts[1], it)
            total = float((col_css.sum(axis=0) * w ** 2).sum())
            shrunk, _ = shrink_from_total(within.singular_values, total,
                                          min(n - K, layout.rank_dim))
            if not opts.regularize:
                shrunk = within.singular_values.copy()
            b_fit = (between.left * between.shrunk / sq[:, None]) @ between.loadings.T
            for k in range(K):
                self.ep.send(k, Message(BROADCAST_STATS, it, 0, {
                    "op": "impute", "offset": offset, "between": b_fit[k],
                    "shrunk": shrunk}))
            msgs = self._gather(ROUND_DONE, it, 0)
            delta_sq = sum(self._scalar(m, "delta_sq") for m in msgs)
            old_sq = sum(self._scalar(m, "old_sq") for m in msgs)
            trace.append(sum(self._scalar(m, "objective") for m in msgs))
            delta = np.sqrt(delta_sq) / max(np.sqrt(old_sq), _EPS)
            starts = (between.loadings, within.right_vectors)
            between_V = between.loadings
            converged = bool(delta < opts.tol)
            final = converged or it == opts.max_iter
            self.ep.broadcast(Message(ROUND_DONE, it, 0, {
                "converged": converged, "final": final, "iterations": it}))
            if final:
                break
        return DistributedRun(it, converged, trace, between_V,
                              within.right_vectors if within else None,
                              within.singular_values if within else None)


def _site_key(site_id):
    """Numeric ids (including digit strings) first, in numeric order; then text."""
    if isinstance(site_id, str):
        try:
            site_id = int(site_id)
        except ValueError:
            return (1, 0, site_id)
    return (0, site_id, "")
