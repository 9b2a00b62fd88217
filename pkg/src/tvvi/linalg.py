"""Sparse linear-algebra plumbing.

The central piece is :class:`SaddleSolver`, which handles the symmetric
saddle-point systems

    H x + C^T nu = r1
    C x          = r2

that show up in every derivative, adjoint and projection computation. The
constraint matrix ``C`` is frequently rank deficient (redundant gradient
rows on plug regions). Redundant rows are removed by a pivoted QR
factorization of the dense block of ``C`` restricted to the columns it
touches, after which the KKT matrix is nonsingular and is factored exactly.
When that block is too large for a dense factorization the solver falls
back to the quasi-definite regularization ``[[H, C^T], [C, -delta I]]``
with proximal multiplier refinement.
"""

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import null_space

from .errors import SingularSystem

DENSE_ROW_SELECTION_LIMIT = 2e7


def independent_rows(C, rtol=1e-10):
    """Indices of a maximal linearly independent subset of the rows of ``C``.

    Returns ``None`` when the compressed block is too large to factor densely.
    """
    C = sp.csr_matrix(C)
    k = C.shape[0]
    if k == 0:
        return np.zeros(0, dtype=int)
    cols = np.unique(C.indices)
    if k * len(cols) > DENSE_ROW_SELECTION_LIMIT:
        return None
    block = C[:, cols].toarray()
    # scale rows so the rank decision does not depend on row norms
    norms = np.linalg.norm(block, axis=1)
    keep = norms > 0
    idx = np.flatnonzero(keep)
    if not len(idx):
        return idx
    block = block[idx] / norms[idx, None]
    _, R, piv = sla.qr(block.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rtol * diag[0]))
    return np.sort(idx[piv[:rank]])


class SaddleSolver:
    """Factor a saddle-point matrix once and solve for many right-hand sides.

    Parameters
    ----------
    H : sparse matrix, shape (n, n)
        Symmetric positive definite on the null space of ``C``.
    C : sparse matrix, shape (k, n) or None
        Constraint rows. ``None`` or ``k == 0`` reduces to a plain solve.
    delta : float, optional
        Regularization used only on the fallback path.
    """

    def __init__(self, H, C=None, delta=None):
        H = sp.csc_matrix(H)
        self.n = H.shape[0]
        self.H = H
        if C is None or C.shape[0] == 0:
            self.k = 0
            self.C = sp.csr_matrix((0, self.n))
        else:
            self.C = sp.csr_matrix(C)
            self.k = self.C.shape[0]
        self.rows = None
        self.delta = 0.0
        if self.k == 0:
            M = H
        else:
            self.rows = None if delta is not None else independent_rows(self.C)
            if self.rows is not None:
                Cr = self.C[self.rows]
                kr = len(self.rows)
                M = sp.bmat([[H, Cr.T], [Cr, sp.csr_matrix((kr, kr))]], format="csc")
                self._Cr = Cr
            else:
                hscale = float(np.median(np.abs(H.diagonal()))) or 1.0
                cscale = float(np.max(np.asarray(self.C.multiply(self.C).sum(axis=1)))) or 1.0
                self.delta = delta if delta is not None else 1e-8 * cscale / hscale
                M = sp.bmat(
                    [[H, self.C.T], [self.C, -self.delta * sp.identity(self.k)]],
                    format="csc",
                )
        self._M = M
        try:
            self._lu = spla.splu(M)
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from exc

    def solve(self, r1, r2=None, tol=1e-12, max_refine=100):
        """Return ``(x, nu)``; raises :class:`SingularSystem` if the
        constraints cannot be met."""
        r1 = np.asarray(r1, dtype=float)
        if self.k == 0:
            x = self._refined(r1)
            return x, np.zeros(0)
        r2 = np.zeros(self.k) if r2 is None else np.asarray(r2, dtype=float)
        scale = max(1.0, np.linalg.norm(r1), np.linalg.norm(r2))
        if self.rows is not None:
            sol = self._refined(np.concatenate([r1, r2[self.rows]]))
            x = sol[: self.n]
            nu = np.zeros(self.k)
            nu[self.rows] = sol[self.n :]
            feas = np.linalg.norm(self.C @ x - r2)
            if feas > 1e-8 * scale:
                raise SingularSystem(f"constraint residual {feas:.3e}")
            return x, nu
        return self._proximal(r1, r2, scale, tol, max_refine)

    def _refined(self, rhs, steps=2):
        sol = self._lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise SingularSystem("non-finite solution")
        for _ in range(steps):
            res = rhs - self._M @ sol
            if np.linalg.norm(res) <= 1e-15 * max(1.0, np.linalg.norm(rhs)):
                break
            sol = sol + self._lu.solve(res)
        return sol

    def _proximal(self, r1, r2, scale, tol, max_refine):
        nu = np.zeros(self.k)
        rhs = np.empty(self.n + self.k)
        prev_step = np.inf
        feas = np.inf
        for it in range(max_refine):
            rhs[: self.n] = r1
            rhs[self.n :] = r2 - self.delta * nu
            sol = self._lu.solve(rhs)
            x, nu_new = sol[: self.n], sol[self.n :]
            if not np.all(np.isfinite(sol)):
                raise SingularSystem("non-finite solution")
            step = np.linalg.norm(nu_new - nu)
            nu = nu_new
            feas = np.linalg.norm(self.C @ x - r2)
            if feas <= tol * scale and (
                step <= 1e-9 * max(1.0, np.linalg.norm(nu)) or step > 0.5 * prev_step
            ):
                return x, nu
            if it > 2 and step > 10.0 * prev_step:
                break
            prev_step = step
        if feas > 1e-8 * scale:
            raise SingularSystem(f"constraint residual {feas:.3e} after refinement")
        return x, nu


def solve_spd(M, b):
    """Sparse direct solve with a conjugate-gradient fallback."""
    try:
        x = spla.splu(sp.csc_matrix(M)).solve(b)
        if np.all(np.isfinite(x)):
            return x
    except RuntimeError:
        pass
    x, info = spla.cg(M, b, rtol=1e-12, maxiter=10 * M.shape[0])
    if info != 0:
        raise SingularSystem("direct factorization and CG both failed")
    return x


def power_norm(apply, apply_t, n, iters=200, seed=0, rtol=1e-10):
    """Spectral norm of a linear map by power iteration on ``apply_t o apply``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        z = apply_t(apply(x))
        new = np.linalg.norm(z)
        if new == 0.0:
            return 0.0
        x = z / new
        if abs(new - lam) <= rtol * new:
            lam = new
            break
        lam = new
    return float(np.sqrt(lam))


def inverse_norm_spd(A, iters=500, seed=0, rtol=1e-10):
    """``||A^{-1}||_2`` for SPD ``A`` by power iteration on the inverse."""
    A = sp.csc_matrix(A)
    lu = spla.splu(A)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(A.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        z = lu.solve(x)
        new = np.linalg.norm(z)
        x = z / new
        if abs(new - lam) <= rtol * new:
            return float(new)
        lam = new
    return float(lam)


def sym_norm(H, iters=100, seed=0):
    """Spectral norm of a dense symmetric matrix by power iteration."""
    H = np.asarray(H)
    if H.size == 0:
        return 0.0
    return power_norm(lambda v: H @ v, lambda v: H.T @ v, H.shape[0], iters=iters, seed=seed)


def orth_complement(v):
    """Orthonormal basis (rows) of the complement of a unit vector in R^d."""
    v = np.asarray(v, dtype=float)
    if v.size == 1:
        return np.zeros((0, 1))
    if v.size == 2:
        return np.array([[-v[1], v[0]]])
    return null_space(v[None, :]).T


def stacked_block_diag(blocks):
    """Sparse block-diagonal operator for per-cell ``d x d`` blocks.

    ``blocks`` has shape ``(m, d, d)``; the result acts on vectors in the
    stacked ordering ``c*m + j`` used by :attr:`VIProblem.K_stacked`.
    """
    blocks = np.asarray(blocks, dtype=float)
    m, d, _ = blocks.shape
    return sp.bmat(
        [[sp.diags(blocks[:, c1, c2]) for c2 in range(d)] for c1 in range(d)],
        format="csr",
    )


def block_rows(m, d, blocks):
    """Selection matrix picking all ``d`` stacked rows of the given cells."""
    blocks = np.asarray(blocks, dtype=int)
    k = len(blocks)
    cols = (np.arange(d)[None, :] * m + blocks[:, None]).reshape(-1)
    rows = (np.arange(k)[:, None] * d + np.arange(d)[None, :]).reshape(-1)
    return sp.csr_matrix((np.ones(k * d), (rows, cols)), shape=(k * d, m * d))


def line_rows(m, d, blocks, directions):
    """Rows ``b^T (K v)_j`` for an orthonormal basis ``b`` of ``directions[j]``-perp.

    Constraining these rows to zero keeps ``(K v)_j`` on ``span(directions[j])``.
    """
    data, rows, cols = [], [], []
    r = 0
    for j, v in zip(np.asarray(blocks, dtype=int), np.asarray(directions, dtype=float)):
        for b in orth_complement(v):
            for c in range(d):
                if b[c] != 0.0:
                    data.append(b[c])
                    rows.append(r)
                    cols.append(c * m + j)
            r += 1
    return sp.csr_matrix((data, (rows, cols)), shape=(r, m * d))
