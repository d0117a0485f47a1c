"""Worker site: holds its rows locally and answers master requests."""

import numpy as np

from ..data import MixedDataset, schema_hash
from ..errors import ProtocolViolation, SessionAborted
from ..imputation import ImputationResult, Layout, finalize, working_matrix
from .protocol import (BROADCAST_NORM, BROADCAST_R, BROADCAST_STATS, COMPONENT_DONE,
                       HELLO, POWER_NORM, POWER_R, ROUND_DONE, SHUTDOWN, STATS, Message)


def matrix_hash(p):
    return f"matrix:{p}"


class WorkerSite:
    """One site of a distributed session.

    ``data`` is either a :class:`MixedDataset` (imputation sessions) or a plain
    matrix (SVD sessions).  Only summaries leave the site: column sums, sums of
    squares, length-``P`` products ``B_k^T q_k`` and squared norms.
    """

    def __init__(self, site_id, data, link, method=""):
        self.site_id = site_id
        self.link = link
        self.method = method
        if isinstance(data, MixedDataset):
            self.dataset, self.matrix = data, None
        else:
            self.dataset, self.matrix = None, np.asarray(data, dtype=float)
        self.B = None
        self.q = None
        self.left, self.right, self.sigmas = [], [], []
        self.result = None

    # -- session ------------------------------------------------------------

    def hello(self):
        if self.dataset is not None:
            d = self.dataset
            layout = Layout.of(d)
            payload = {"n_k": d.n, "schema_hash": schema_hash(d.schema),
                       "layout": {**layout.to_dict(), "names": list(layout.names)}}
        else:
            n, p = self.matrix.shape
            payload = {"n_k": n, "schema_hash": matrix_hash(p), "layout": {"p": p}}
        payload["site_id"] = self.site_id
        return Message(HELLO, 0, 0, payload)

    def run(self):
        """Serve until SHUTDOWN; returns self."""
        self.link.send(self.hello())
        while True:
            msg = self.link.recv()
            if msg.kind == SHUTDOWN:
                if msg.payload.get("error"):
                    raise SessionAborted(f"master aborted: {msg.payload['error']}")
                return self
            handler = self._handlers().get(msg.kind)
            if handler is None:
                raise ProtocolViolation(msg.kind, msg.round, "unexpected at worker")
            reply = handler(msg)
            if reply is not None:
                self.link.send(reply)

    def _handlers(self):
        return {BROADCAST_STATS: self._on_stats, BROADCAST_R: self._on_r,
                BROADCAST_NORM: self._on_norm, COMPONENT_DONE: self._on_component,
                ROUND_DONE: self._on_round_done}

    def _reply(self, msg, kind, **payload):
        return Message(kind, msg.round, msg.component, payload)

    # -- power iteration ----------------------------------------------------

    def _reset_factors(self):
        self.q = None
        self.left, self.right, self.sigmas = [], [], []

    def _on_r(self, msg):
        self.q = self.B @ msg.vector("v")
        return self._reply(msg, POWER_NORM, sq=float(self.q @ self.q))

    def _on_norm(self, msg):
        self.q = self.q / float(msg.payload["sigma"])
        return self._reply(msg, POWER_R, r=self.local_r())

    def local_r(self):
        return self.B.T @ self.q

    def _on_component(self, msg):
        sigma = float(msg.payload["sigma"])
        v = msg.vector("v")
        if msg.payload["null"]:
            u = np.zeros(self.B.shape[0])
        else:
            u = float(msg.payload["sign"]) * self.q
        self.B -= sigma * np.outer(u, v)
        self.left.append(u)
        self.right.append(v)
        self.sigmas.append(sigma)
        return None

    def left_vectors(self):
        n = self.B.shape[0] if self.B is not None else 0
        return np.column_stack(self.left) if self.left else np.zeros((n, 0))

    # -- statistics and imputation -----------------------------------------

    def _on_stats(self, msg):
        op = msg.payload["op"]
        if op == "svd":
            self.B = self.matrix.copy()
            self._reset_factors()
            return None
        if op == "init":
            self.X, self.observed = working_matrix(self.dataset)
            self.miss = ~self.observed
            return self._reply(msg, STATS, obs_sums=np.nansum(self.X, axis=0),
                               obs_counts=self.observed.sum(axis=0).astype(float))
        if op == "fill":
            self.X = np.where(self.observed, self.X, msg.vector("fill"))
            return None
        if op == "stats":
            X = self.X
            css = ((X - X.mean(axis=0)) ** 2).sum(axis=0)
            return self._reply(msg, STATS, n_k=X.shape[0], col_sums=X.sum(axis=0),
                               col_css=css)
        if op == "fit":
            self.center = msg.vector("mean")
            self.weights = msg.vector("weights")
            self.W = (self.X - self.center) * self.weights
            self.B = self.W - self.W.mean(axis=0)
            self._reset_factors()
            return None
        if op == "impute":
            return self._impute(msg)
        raise ProtocolViolation(BROADCAST_STATS, msg.round, f"unknown op {op!r}")

    def _impute(self, msg):
        shrunk = msg.vector("shrunk")
        scores = self.left_vectors() * shrunk
        V = np.column_stack(self.right) if self.right else np.zeros((self.X.shape[1], 0))
        W_hat = (msg.vector("offset") + msg.vector("between")) + scores @ V.T
        X_hat = W_hat / self.weights + self.center
        objective = float(((self.W - W_hat)[self.observed] ** 2).sum())
        old = self.X[self.miss]
        self.X = self.X.copy()
        self.X[self.miss] = X_hat[self.miss]
        diff = self.X[self.miss] - old
        return self._reply(msg, ROUND_DONE, delta_sq=float(diff @ diff),
                           old_sq=float(old @ old), objective=objective)

    def _on_round_done(self, msg):
        if msg.payload.get("final"):
            layout = Layout.of(self.dataset)
            completed, fuzzy = finalize(self.dataset, self.X, self.observed, layout)
            self.result = ImputationResult(completed, fuzzy, None,
                                           int(msg.payload["iterations"]),
                                           bool(msg.payload["converged"]), [], self.method)
        return None
