"""
Eigendecomposition of graph Laplacians and the graph Fourier transform.

Two solvers are provided: a dense symmetric solver for graphs up to
``DENSE_SIZE_CAP`` nodes and a Lanczos solver with full reorthogonalization and
locking restarts for the K smallest eigenpairs. Both return a canonicalized
``SpectralBasis`` whose invariants are asserted before returning.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import errors
from .const import (
    DEGENERACY_TOL,
    DENSE_SIZE_CAP,
    LANCZOS_RESTART_FACTOR,
    ORTHO_TOL,
    PSD_TOL,
    RESIDUAL_TOL,
)
from .graph_data import build_laplacian
from .rng import stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpectralBasis:
    """Ascending eigenvalues and orthonormal eigenvectors, possibly truncated to K."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    n: int

    def __post_init__(self):
        self.eigenvalues.setflags(write=False)
        self.eigenvectors.setflags(write=False)

    @property
    def k(self):
        return int(self.eigenvalues.shape[0])

    @property
    def is_full(self):
        return self.k == self.n


def canonicalize(eigenvalues, eigenvectors, tol=DEGENERACY_TOL):
    """
    Fix eigenvector signs and the column order inside degenerate blocks.

    The largest-magnitude entry of each column is made positive (ties go to the
    lowest index). Columns are ordered by eigenvalue, and within a block of
    eigenvalues closer than ``tol`` by the lexicographic order of the
    canonicalized vectors.
    """
    vals = np.array(eigenvalues, dtype=np.float64)
    vecs = np.array(eigenvectors, dtype=np.float64)
    order = np.argsort(vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]

    if vecs.shape[1]:
        pivots = np.argmax(np.abs(vecs), axis=0)
        signs = np.sign(vecs[pivots, np.arange(vecs.shape[1])])
        signs[signs == 0] = 1.0
        vecs = vecs * signs

    start = 0
    k = vals.shape[0]
    while start < k:
        stop = start + 1
        while stop < k and vals[stop] - vals[stop - 1] < tol:
            stop += 1
        if stop - start > 1:
            block = sorted(range(start, stop), key=lambda j: tuple(vecs[:, j]))
            vals[start:stop] = vals[block]
            vecs[:, start:stop] = vecs[:, block]
        start = stop
    return vals, vecs


def check_basis(L, basis, residual_tol=RESIDUAL_TOL, ortho_tol=ORTHO_TOL):
    """
    Assert the SpectralBasis invariants against the Laplacian it came from.

    Raises:
        SpectralError: if orthonormality, ordering, PSD or residual bounds fail
    """
    U, lam = basis.eigenvectors, basis.eigenvalues
    gram_err = np.max(np.abs(U.T @ U - np.eye(basis.k))) if basis.k else 0.0
    if gram_err > ortho_tol:
        raise errors.SpectralError(f"eigenvectors not orthonormal: max |U^T U - I| = {gram_err:.3e}")
    if basis.k and np.any(np.diff(lam) < -PSD_TOL):
        raise errors.SpectralError("eigenvalues not ascending")
    if basis.k and lam[0] < -PSD_TOL:
        raise errors.SpectralError(f"smallest eigenvalue {lam[0]:.3e} is negative")
    residuals = residual_norms(L, basis)
    bound = residual_tol * np.maximum(1.0, np.abs(lam))
    if np.any(residuals > bound):
        worst = int(np.argmax(residuals / bound))
        raise errors.SpectralError(f"residual {residuals[worst]:.3e} too large for component {worst}")
    return basis


def residual_norms(L, basis):
    """Per-column ``|L u_i - lambda_i u_i|_2``."""
    U = basis.eigenvectors
    return np.linalg.norm(L.entries @ U - U * basis.eigenvalues, axis=0)


def eig_dense(L, size_cap=DENSE_SIZE_CAP):
    """
    Full eigendecomposition of a Laplacian.

    Args:
        L: Laplacian
        size_cap: Largest n accepted; larger graphs must use ``eig_lanczos``

    Returns:
        Full SpectralBasis (K = n)
    """
    if L.n > size_cap:
        raise errors.SizeCapExceeded(f"n={L.n} exceeds dense size cap {size_cap}; use eig_lanczos")
    if L.n == 0:
        return SpectralBasis(np.zeros(0), np.zeros((0, 0)), 0)
    vals, vecs = sla.eigh(L.toarray())
    vals, vecs = canonicalize(vals, vecs)
    basis = SpectralBasis(vals, vecs, L.n)
    logger.debug(f"Dense decomposition of n={L.n}, lambda range [{vals[0]:.4g}, {vals[-1]:.4g}]")
    return check_basis(L, basis)


def _orthogonalize(r, blocks):
    # two passes of classical Gram-Schmidt
    for _ in range(2):
        for Q in blocks:
            if Q.shape[1]:
                r = r - Q @ (Q.T @ r)
    return r


def _lanczos_cycle(L, start, locked, m, gen):
    """Build an m-step Lanczos basis orthogonal to ``locked``, restarting on breakdown."""
    n = L.n
    Q = np.zeros((n, m))
    alphas = np.zeros(m)
    betas = np.zeros(max(m - 1, 0))
    q = _orthogonalize(start, [locked])
    q = q / np.linalg.norm(q)
    scale = max(1.0, abs(L.entries).sum(axis=1).max())
    built = 0
    for j in range(m):
        Q[:, j] = q
        built = j + 1
        w = L.entries @ q
        alphas[j] = q @ w
        if j == m - 1:
            break
        w = _orthogonalize(w, [locked, Q[:, :j + 1]])
        beta = np.linalg.norm(w)
        if beta < 1e-10 * scale:
            # invariant subspace found; continue from a fresh random direction
            w = _orthogonalize(gen.standard_normal(n), [locked, Q[:, :j + 1]])
            norm = np.linalg.norm(w)
            if norm < 1e-10:
                break
            beta_next, q = 0.0, w / norm
        else:
            beta_next, q = beta, w / beta
        betas[j] = beta_next
    return Q[:, :built], alphas[:built], betas[:built - 1]


def eig_lanczos(L, k, seed=0, max_restarts=None, subspace_dim=None, tol=1e-10):
    """
    The k smallest eigenpairs by Lanczos with full reorthogonalization.

    Converged Ritz pairs are locked and deflated; each restart continues from
    the unconverged wanted Ritz vectors plus a seeded random component, so
    repeated eigenvalues are recovered.

    Args:
        L: Laplacian
        k: Number of smallest eigenpairs, 1 <= k < n
        seed: Seed for the start vectors
        max_restarts: Restart budget, default 10*k
        subspace_dim: Krylov basis size per cycle
        tol: Relative residual tolerance for locking

    Returns:
        Truncated SpectralBasis with k columns

    Raises:
        InvalidRank: k out of range
        NonConvergence: fewer than k pairs converged within the restart budget
    """
    n = L.n
    if not 1 <= k < n:
        raise errors.InvalidRank(f"k={k} must satisfy 1 <= k < n={n}")
    max_restarts = LANCZOS_RESTART_FACTOR * k if max_restarts is None else max_restarts
    m = subspace_dim or min(n, max(8 * k, k + 150))
    gen = stream(seed, "lanczos", n, k)

    locked_vecs = np.zeros((n, 0))
    locked_vals = np.zeros(0)
    start = gen.standard_normal(n)
    for restart in range(max_restarts + 1):
        wanted = k - locked_vals.shape[0]
        if wanted <= 0:
            break
        dim = min(m, n - locked_vals.shape[0])
        Q, alphas, betas = _lanczos_cycle(L, start, locked_vecs, dim, gen)
        theta, S = sla.eigh_tridiagonal(alphas, betas) if betas.size else (alphas.copy(), np.eye(1))
        Y = Q @ S
        res = np.linalg.norm(L.entries @ Y - Y * theta, axis=0)
        converged = res <= tol * np.maximum(1.0, np.abs(theta))
        take = [i for i in range(min(wanted, theta.shape[0])) if converged[i]]
        if take:
            locked_vecs = np.hstack([locked_vecs, Y[:, take]])
            locked_vals = np.concatenate([locked_vals, theta[take]])
        pending = [i for i in range(min(wanted, theta.shape[0])) if not converged[i]]
        start = Y[:, pending].sum(axis=1) if pending else np.zeros(n)
        start = start + 1e-3 * gen.standard_normal(n)
        logger.debug(f"Lanczos restart {restart}: locked {locked_vals.shape[0]}/{k}")
    else:
        if locked_vals.shape[0] < k:
            raise errors.NonConvergence(
                f"only {locked_vals.shape[0]} of {k} eigenpairs converged after {max_restarts} restarts")

    # a late-locked pair can undercut an earlier one; keep the k smallest
    vals, vecs = canonicalize(locked_vals, locked_vecs)
    basis = SpectralBasis(vals[:k], vecs[:, :k], n)
    return check_basis(L, basis)


def decompose(g, k=None, normalized=False, seed=0, size_cap=DENSE_SIZE_CAP):
    """
    Decompose a graph's Laplacian, dense when possible.

    Args:
        g: Graph
        k: Components wanted; None for the full basis
        normalized: Use the normalized Laplacian
        seed: Lanczos seed
        size_cap: Dense solver cap

    Returns:
        SpectralBasis with min(k, n) columns
    """
    L = build_laplacian(g, normalized=normalized)
    if L.n <= size_cap:
        basis = eig_dense(L, size_cap=size_cap)
        return basis if k is None or k >= basis.k else truncate(basis, k)
    if k is None:
        raise errors.SizeCapExceeded(f"n={L.n} needs a component count k for the Lanczos solver")
    return eig_lanczos(L, min(k, L.n - 1), seed=seed)


def gft(basis, x):
    """
    Graph Fourier transform ``x_hat = U^T x``.

    Args:
        basis: SpectralBasis
        x: Signal vector of length n, or an n x F matrix of signals

    Returns:
        Spectrum of length K (or K x F)
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != basis.n:
        raise errors.DimensionMismatch(f"signal length {x.shape[0]} != n={basis.n}")
    return basis.eigenvectors.T @ x


def igft(basis, xhat):
    """Inverse graph Fourier transform ``x = U x_hat``."""
    xhat = np.asarray(xhat, dtype=np.float64)
    if xhat.shape[0] != basis.k:
        raise errors.DimensionMismatch(f"spectrum length {xhat.shape[0]} != K={basis.k}")
    return basis.eigenvectors @ xhat


def truncate(basis, k):
    """Keep the first k components."""
    if not 0 <= k <= basis.k:
        raise errors.InvalidRank(f"cannot truncate a {basis.k}-component basis to {k}")
    return SpectralBasis(basis.eigenvalues[:k].copy(), basis.eigenvectors[:, :k].copy(), basis.n)


def subspace_angle(U, V):
    """Largest principal angle (radians) between the column spans of U and V."""
    if U.shape[1] == 0 or V.shape[1] == 0:
        return 0.0
    return float(np.max(sla.subspace_angles(U, V)))


def spectral_distance(g1, g2, k=16, normalized=False):
    """Sum of |lambda_i - lambda'_i| over the first k eigenvalues of two graphs."""
    b1 = decompose(g1, k=k, normalized=normalized)
    b2 = decompose(g2, k=k, normalized=normalized)
    kk = min(b1.k, b2.k)
    return float(np.sum(np.abs(b1.eigenvalues[:kk] - b2.eigenvalues[:kk])))
