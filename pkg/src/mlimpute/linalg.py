"""Dense SVD machinery built on the power method.

Singular triplets are extracted one at a time by power iteration followed by
deflation.  The same iteration is replayed message-by-message by the
distributed master (see :mod:`mlimpute.distributed`), so the helpers that pick
start vectors, fix signs and detect exhausted ranks are public.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidRank, NonConvergence, ZeroMatrix

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 1000

# A deflated matrix whose image of a random start is below this fraction of
# the leading singular value is treated as exhausted.
NULL_RTOL = 1e-12
START_ATTEMPTS = 3
_SIGN_ATOL = 1e-10


@dataclass(frozen=True)
class SvdResult:
    left_vectors: np.ndarray
    singular_values: np.ndarray
    right_vectors: np.ndarray
    converged: tuple = field(default=())

    @property
    def rank(self):
        return len(self.singular_values)

    @property
    def scores(self):
        """Left vectors scaled by their singular values (``U diag(S)``)."""
        return self.left_vectors * self.singular_values

    def reconstruct(self):
        return self.scores @ self.right_vectors.T


def start_vector(seed, index, attempt, size):
    """Deterministic Gaussian draw for component ``index``.

    ``attempt`` selects a fresh stream when a previous draw was annihilated by
    the matrix.
    """
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, index, attempt])
    return rng.standard_normal(size)


def fix_sign(v):
    """Return +1 or -1 so that the first non-negligible entry of ``v`` is positive."""
    nz = np.flatnonzero(np.abs(v) > _SIGN_ATOL)
    if nz.size and v[nz[0]] < 0:
        return -1.0
    return 1.0


def complete_basis(basis, size, seed, index):
    """A unit vector orthogonal to the columns of ``basis`` (Gram-Schmidt on a draw)."""
    for attempt in range(START_ATTEMPTS, START_ATTEMPTS + 10):
        x = start_vector(seed, index, attempt, size)
        for _ in range(2):
            if basis.shape[1]:
                x = x - basis @ (basis.T @ x)
        nrm = np.linalg.norm(x)
        if nrm > 1e-8:
            return x / nrm
    raise InvalidRank("cannot extend basis beyond its dimension")


def converged_residual(z, sigma, v, tol):
    """Stopping rule shared by the central and distributed iterations.

    ``z`` is ``A^T u`` for the current left iterate; convergence means
    ``||A^T u - sigma v|| <= tol * sigma``.
    """
    return np.linalg.norm(z - sigma * v) <= tol * sigma


def power_method(A, start, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Leading singular triplet of ``A`` by alternating power iteration.

    Parameters
    ----------
    A : (n, p) array
    start : (n,) unit vector, the initial left iterate.
    tol : relative residual threshold, ``||A^T u - sigma v|| <= tol * sigma``.
    max_iter : maximum number of full iterations.

    Returns
    -------
    u, sigma, v
        ``v`` is sign-normalized so its first non-negligible entry is positive.

    Raises
    ------
    ZeroMatrix
        If ``A`` is identically zero.
    NonConvergence
        If ``max_iter`` is reached; ``iterate`` holds the last ``(u, sigma, v)``.
    """
    A = np.asarray(A, dtype=float)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not np.any(A):
        raise ZeroMatrix("power method on a zero matrix")
    q = np.asarray(start, dtype=float)
    if q.shape != (A.shape[0],):
        raise ValueError(f"start must have length {A.shape[0]}")
    if abs(np.linalg.norm(q) - 1.0) > 1e-8:
        raise ValueError("start must have unit norm")

    sigma, v = 0.0, None
    for it in range(max_iter + 1):
        z = A.T @ q
        if v is not None and converged_residual(z, sigma, v, tol):
            s = fix_sign(v)
            return s * q, sigma, s * v
        if it == max_iter:
            break
        zn = np.linalg.norm(z)
        if zn == 0.0:
            raise NonConvergence("start vector is orthogonal to the column space",
                                 iterate=(q, 0.0, z))
        v = z / zn
        q = A @ v
        sigma = np.linalg.norm(q)
        q = q / sigma
    s = fix_sign(v)
    raise NonConvergence(f"power method did not converge in {max_iter} iterations",
                         iterate=(s * q, sigma, s * v))


def initial_left(B, g, sigma_lead):
    """Normalized ``B g``, or None when ``B`` annihilates ``g`` (exhausted rank)."""
    q = B @ g
    qn = np.linalg.norm(q)
    if qn == 0.0 or qn <= NULL_RTOL * sigma_lead * np.linalg.norm(g):
        return None
    return q / qn


def truncated_svd(A, Q, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, seed=0,
                  start=None, refine=True, strict=True):
    """Rank-``Q`` SVD by repeated power iteration and deflation.

    Parameters
    ----------
    A : (n, p) array
    Q : number of components, ``0 <= Q <= min(n, p)``.
    seed : seeds the Gaussian right-side start draws, one stream per component.
    start : optional (p, Q') array of warm-start right vectors; column ``i``
        replaces the first draw for component ``i``.
    refine : orthonormalize the extracted span and rotate it with a Q x Q SVD
        (Rayleigh-Ritz).  This resolves near-tied singular values that plain
        deflation leaves mixed.
    strict : raise :class:`NonConvergence` when a component fails the residual
        test; otherwise keep the last iterate.

    Components beyond the numerical rank of ``A`` get a zero singular value
    and basis vectors completing the orthonormal sets.
    """
    A = np.asarray(A, dtype=float)
    n, p = A.shape
    if Q < 0 or Q > min(n, p):
        raise InvalidRank(f"Q={Q} outside [0, {min(n, p)}]")

    U = np.zeros((n, Q))
    V = np.zeros((p, Q))
    S = np.zeros(Q)
    ok = [True] * Q
    B = A.copy()
    sigma_lead = 0.0
    exhausted = False
    for i in range(Q):
        q0 = None
        if not exhausted:
            for attempt in range(START_ATTEMPTS):
                if attempt == 0 and start is not None and i < start.shape[1]:
                    g = start[:, i]
                else:
                    g = start_vector(seed, i, attempt, p)
                q0 = initial_left(B, g, sigma_lead)
                if q0 is not None:
                    break
        if q0 is None:
            exhausted = True
            V[:, i] = complete_basis(V[:, :i], p, seed, i)
            U[:, i] = complete_basis(U[:, :i], n, seed, i + Q)
            continue
        try:
            u, s, v = power_method(B, q0, tol, max_iter)
        except NonConvergence as exc:
            if strict and not refine:
                raise NonConvergence(str(exc), index=i, iterate=exc.iterate) from None
            ok[i] = False
            u, s, v = exc.iterate
        U[:, i], S[i], V[:, i] = u, s, v
        if i == 0:
            sigma_lead = s
        B -= s * np.outer(u, v)

    if refine and Q:
        U, S, V, ok = _rayleigh_ritz(A, U, S, V, tol)
        if strict and not all(ok):
            bad = ok.index(False)
            raise NonConvergence(f"component {bad} failed after refinement", index=bad,
                                 iterate=(U[:, bad], S[bad], V[:, bad]))
    return SvdResult(U, S, V, tuple(ok))


def _rayleigh_ritz(A, U, S, V, tol):
    r = int(np.count_nonzero(S))
    if r:
        Uq, _ = np.linalg.qr(U[:, :r])
        Vq, _ = np.linalg.qr(V[:, :r])
        P, s, Rt = np.linalg.svd(Uq.T @ A @ Vq)
        Ur, Vr = Uq @ P, Vq @ Rt.T
        for j in range(r):
            sgn = fix_sign(Vr[:, j])
            Ur[:, j] *= sgn
            Vr[:, j] *= sgn
        U = np.column_stack([Ur, U[:, r:]])
        V = np.column_stack([Vr, V[:, r:]])
        S = np.concatenate([s, S[r:]])
    scale = S[0] if len(S) else 0.0
    ok = []
    for j in range(len(S)):
        if S[j] == 0.0:
            ok.append(True)
            continue
        res = np.linalg.norm(A.T @ U[:, j] - S[j] * V[:, j])
        ok.append(bool(res <= tol * scale))
    return U, S, V, ok


def _shrink(lam, sigma2):
    lam = np.asarray(lam, dtype=float)
    root = np.sqrt(lam)
    out = np.zeros_like(lam)
    pos = root > 0
    out[pos] = (lam[pos] - sigma2) / root[pos]
    return np.maximum(out, 0.0)


def shrink_spectrum(eigenvalues, Q, effective_rank):
    """Shrunken singular values ``(lambda_s - sigma2) / sqrt(lambda_s)`` for ``s <= Q``.

    ``eigenvalues`` are squared singular values in non-increasing order (the
    only reading under which the formula shrinks ``sqrt(lambda)``).  The noise
    variance ``sigma2`` is the mean of eigenvalues ``Q+1 .. effective_rank``
    and is zero when ``Q == effective_rank``.  Negative results clamp to 0.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if Q > effective_rank:
        raise InvalidRank(f"Q={Q} exceeds effective rank {effective_rank}")
    if len(lam) < effective_rank:
        raise ValueError("need at least effective_rank eigenvalues")
    if np.any(lam < 0) or np.any(np.diff(lam) > 0):
        raise ValueError("eigenvalues must be nonnegative and non-increasing")
    trailing = lam[Q:effective_rank].sum()
    sigma2 = trailing / (effective_rank - Q) if effective_rank > Q else 0.0
    return _shrink(lam[:Q], sigma2)


def shrink_from_total(singular_values, total_sq, effective_rank):
    """Same shrinkage, with the trailing eigenvalues known only through their sum.

    The eigenvalues of a matrix sum to its squared Frobenius norm
    ``total_sq``, so the leading ``Q`` singular values suffice.

    Returns ``(shrunk, sigma2)``.
    """
    s = np.asarray(singular_values, dtype=float)
    Q = len(s)
    if Q > effective_rank:
        raise InvalidRank(f"Q={Q} exceeds effective rank {effective_rank}")
    lam = s ** 2
    if effective_rank > Q:
        sigma2 = max(total_sq - lam.sum(), 0.0) / (effective_rank - Q)
    else:
        sigma2 = 0.0
    return _shrink(lam, sigma2), sigma2
