"""Sparse CSR operator plus deterministic Krylov solvers.

Solve entry points:

``solve_square``       square nonsymmetric systems by right-preconditioned
                       BiCGStab with breakdown detection and a restarted
                       GMRES fallback; the reported residual is always
                       the true relative residual.

``solve_min_norm``     consistent underdetermined systems A x = b by
                       conjugate gradients on the normal equations
                       A A^H y = b with x = A^H y carried incrementally,
                       so the iterate stays in range(A^H) and converges
                       to the minimum-norm solution.  The preconditioner
                       acts on the equation (row) space and must be
                       Hermitian positive definite; Jacobi (inverse
                       squared row norms) and a DST-diagonalized
                       shifted-Poisson solve are provided.

``*_block`` variants   the same iterations run in lockstep over many
                       right-hand sides with per-column scalars and an
                       active-column mask, so the sparse matvec is
                       amortized across the block.  Identical arithmetic
                       per column as the single-vector solvers up to
                       the iteration each column converges.

``FactorizedMinNorm`` / ``FactorizedSquare`` trade one sparse LU
factorization for cheap repeated solves when many right-hand sides
share an operator.  Both row-equilibrate the operator first (the
conjugated operators solved here mix band rows with gauge-branch rows
whose coefficients are many orders of magnitude larger) and polish each
solve with iterative refinement; the reported residual is the true
relative residual of the equilibrated system, i.e. a row-weighted
backward error of the original one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.fft
import scipy.sparse
import scipy.sparse.linalg

_TINY = 1e-300


@dataclass(frozen=True)
class SparseOperator:
    """Validated canonical CSR matrix wrapper (scipy does the matvec work).

    indptr  : (m + 1,) int64, nondecreasing, indptr[0] == 0.
    indices : column indices, all in [0, n); strictly increasing within
              each row after canonicalization.
    data    : matching values, real or complex float64; no explicit
              zeros are stored.
    shape   : (m, n).

    The constructor canonicalizes arbitrary valid CSR input (sorts
    indices, merges duplicates, drops stored zeros).
    """

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self) -> None:
        indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        data = np.ascontiguousarray(self.data)
        m, n = self.shape
        if indptr.ndim != 1 or indptr.size != m + 1:
            raise ValueError(f"indptr must have length m+1={m + 1}, got {indptr.size}")
        if indptr[0] != 0 or indptr[-1] != indices.size:
            raise ValueError("indptr must start at 0 and end at nnz")
        if np.any(np.diff(indptr) < 0):
            raise ValueError("indptr must be nondecreasing")
        if indices.size != data.size:
            raise ValueError("indices and data must have equal length")
        if indices.size and (indices.min() < 0 or indices.max() >= n):
            raise ValueError("column indices out of range")
        if not np.issubdtype(data.dtype, np.inexact):
            data = data.astype(float)
        csr = scipy.sparse.csr_matrix((data, indices, indptr), shape=self.shape)
        csr.sum_duplicates()  # also sorts indices within rows
        csr.eliminate_zeros()
        object.__setattr__(self, "indptr", np.ascontiguousarray(csr.indptr, dtype=np.int64))
        object.__setattr__(self, "indices", np.ascontiguousarray(csr.indices, dtype=np.int64))
        object.__setattr__(self, "data", csr.data)
        object.__setattr__(self, "_csr", csr)

    @staticmethod
    def from_coo(rows, cols, vals, shape) -> "SparseOperator":
        """Build from triplets; duplicate entries are summed."""
        mat = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
        return SparseOperator(mat.indptr, mat.indices, mat.data, shape)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def is_complex(self) -> bool:
        return bool(np.iscomplexobj(self.data))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self._csr @ x

    def rmatvec(self, y: np.ndarray) -> np.ndarray:
        """Conjugate-transpose product A^H y."""
        return self._csr.conj().T @ y

    def diagonal(self) -> np.ndarray:
        return self._csr.diagonal()

    def row_norms_sq(self) -> np.ndarray:
        """Squared 2-norm of each row (the diagonal of A A^H)."""
        mags = np.abs(self.data) ** 2
        out = np.zeros(self.shape[0])
        np.add.at(out, np.repeat(np.arange(self.shape[0]), np.diff(self.indptr)), mags)
        return out

    def to_scipy(self) -> scipy.sparse.csr_matrix:
        return self._csr


@dataclass(frozen=True)
class SolveResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual: float
    method: str
    breakdown: str | None = None


@dataclass(frozen=True)
class BlockSolveResult:
    """Per-column outcome of a lockstep multi-RHS solve.

    x has shape (n, K); converged, iterations, residual have shape (K,).
    """

    x: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray
    method: str
    breakdown: tuple = ()

    def column(self, j: int) -> SolveResult:
        return SolveResult(
            self.x[:, j],
            bool(self.converged[j]),
            int(self.iterations[j]),
            float(self.residual[j]),
            self.method,
            self.breakdown[j] if self.breakdown else None,
        )


def _jacobi_square(op: SparseOperator) -> np.ndarray:
    d = op.diagonal().copy()
    bad = np.abs(d) < _TINY
    d[bad] = 1.0
    return 1.0 / d


def _resolve_square_preconditioner(
    op: SparseOperator, preconditioner
) -> Callable[[np.ndarray], np.ndarray]:
    if preconditioner == "jacobi":
        minv = _jacobi_square(op)

        def apply(z: np.ndarray) -> np.ndarray:
            return minv[:, None] * z if z.ndim == 2 else minv * z

        return apply
    if callable(preconditioner):
        return preconditioner
    raise ValueError(f"unknown preconditioner {preconditioner!r}")


def solve_square(
    op: SparseOperator,
    b: np.ndarray,
    tol: float = 1e-10,
    maxiter: int | None = None,
    use_fallback: bool = True,
    preconditioner: Callable[[np.ndarray], np.ndarray] | str = "jacobi",
) -> SolveResult:
    """Solve a square system by right-preconditioned BiCGStab.

    Falls back to restarted GMRES on breakdown or stagnation when
    use_fallback is set.  Deterministic: the shadow residual is the
    initial residual.  ``converged`` is True only when the true relative
    residual meets tol.
    """
    res = solve_square_block(
        op,
        np.asarray(b)[:, None],
        tol=tol,
        maxiter=maxiter,
        use_fallback=use_fallback,
        preconditioner=preconditioner,
    )
    return res.column(0)


def solve_square_block(
    op: SparseOperator,
    B: np.ndarray,
    tol: float = 1e-10,
    maxiter: int | None = None,
    use_fallback: bool = True,
    preconditioner: Callable[[np.ndarray], np.ndarray] | str = "jacobi",
) -> BlockSolveResult:
    """Lockstep BiCGStab over the columns of B with per-column scalars.

    Columns converge (and freeze) independently; breakdown in one column
    stops only that column.  A restarted-GMRES cleanup pass runs on any
    column whose true residual still misses tol.
    """
    m, n = op.shape
    if m != n:
        raise ValueError(f"square solve needs a square operator, got {op.shape}")
    B = np.asarray(B)
    if B.ndim != 2 or B.shape[0] != n:
        raise ValueError(f"rhs block must have shape (n, K), got {B.shape}")
    K = B.shape[1]
    if maxiter is None:
        maxiter = max(1000, 4 * n)
    prec = _resolve_square_preconditioner(op, preconditioner)

    dtype = np.result_type(op.data.dtype, B.dtype)
    bnorm = np.linalg.norm(B, axis=0)
    X = np.zeros((n, K), dtype=dtype)
    R = B.astype(dtype, copy=True)
    R_shadow = R.copy()
    rho = np.ones(K, dtype=dtype)
    alpha = np.ones(K, dtype=dtype)
    omega = np.ones(K, dtype=dtype)
    V = np.zeros((n, K), dtype=dtype)
    P = np.zeros((n, K), dtype=dtype)
    breakdown: list[str | None] = [None] * K
    iterations = np.zeros(K, dtype=int)
    active = bnorm > 0.0
    resnorm = np.where(bnorm > 0, 1.0, 0.0)

    it = 0
    while np.any(active) and it < maxiter:
        it += 1
        a = active
        rho_new = np.sum(np.conj(R_shadow[:, a]) * R[:, a], axis=0)
        bad = np.abs(rho_new) < _TINY * bnorm[a] ** 2
        if np.any(bad):
            for j in np.flatnonzero(a)[bad]:
                breakdown[j] = "rho"
                iterations[j] = it
            active = active.copy()
            active[np.flatnonzero(a)[bad]] = False
            a = active
            if not np.any(a):
                break
            rho_new = rho_new[~bad]
        beta = (rho_new / rho[a]) * (alpha[a] / omega[a])
        P[:, a] = R[:, a] + beta[None, :] * (P[:, a] - omega[a][None, :] * V[:, a])
        P_hat = prec(P[:, a])
        V[:, a] = op.matvec(P_hat)
        denom = np.sum(np.conj(R_shadow[:, a]) * V[:, a], axis=0)
        bad = np.abs(denom) < _TINY * bnorm[a]
        if np.any(bad):
            for j in np.flatnonzero(a)[bad]:
                breakdown[j] = "alpha"
                iterations[j] = it
            keep = ~bad
            sel = np.flatnonzero(a)[keep]
            active = np.zeros_like(active)
            active[sel] = True
            a = active
            if not np.any(a):
                break
            rho_new = rho_new[keep]
            denom = denom[keep]
            P_hat = P_hat[:, keep]
        al = rho_new / denom
        alpha[a] = al
        S = R[:, a] - al[None, :] * V[:, a]
        X[:, a] = X[:, a] + al[None, :] * P_hat
        snorm = np.linalg.norm(S, axis=0)
        early = snorm <= tol * bnorm[a]
        if np.any(early):
            sel = np.flatnonzero(a)[early]
            R[:, sel] = S[:, early]
            resnorm[sel] = snorm[early] / np.maximum(bnorm[sel], _TINY)
            iterations[sel] = it
            keep = ~early
            live = np.flatnonzero(a)[keep]
            active = np.zeros_like(active)
            active[live] = True
            a = active
            if not np.any(a):
                break
            rho_new = rho_new[keep]
            S = S[:, keep]
        S_hat = prec(S)
        T = op.matvec(S_hat)
        tt = np.sum(np.abs(T) ** 2, axis=0)
        om = np.sum(np.conj(T) * S, axis=0) / np.maximum(tt, _TINY)
        bad = (tt < _TINY) | (np.abs(om) < _TINY)
        if np.any(bad):
            for j in np.flatnonzero(a)[bad]:
                breakdown[j] = "omega"
                iterations[j] = it
            keep = ~bad
            live = np.flatnonzero(a)[keep]
            active = np.zeros_like(active)
            active[live] = True
            a = active
            if not np.any(a):
                break
            rho_new = rho_new[keep]
            S = S[:, keep]
            S_hat = S_hat[:, keep]
            T = T[:, keep]
            om = om[keep]
        omega[a] = om
        X[:, a] = X[:, a] + om[None, :] * S_hat
        R[:, a] = S - om[None, :] * T
        rho[a] = rho_new
        rn = np.linalg.norm(R[:, a], axis=0)
        resnorm[a] = rn / np.maximum(bnorm[a], _TINY)
        done = rn <= tol * bnorm[a]
        if np.any(done):
            sel = np.flatnonzero(a)[done]
            iterations[sel] = it
            live = np.flatnonzero(a)[~done]
            active = np.zeros_like(active)
            active[live] = True
    iterations[active] = it

    true_res = np.linalg.norm(B - op.matvec(X), axis=0) / np.maximum(bnorm, _TINY)
    true_res[bnorm == 0.0] = 0.0
    need_fix = (true_res > tol) & (bnorm > 0)
    method = "bicgstab"
    if use_fallback and np.any(need_fix):
        method = "bicgstab+gmres"
        csr = op.to_scipy().astype(dtype)
        M = scipy.sparse.linalg.LinearOperator(
            op.shape, matvec=lambda z: prec(z), dtype=dtype
        )
        for j in np.flatnonzero(need_fix):
            xg, _ = scipy.sparse.linalg.gmres(
                csr,
                B[:, j],
                x0=X[:, j],
                rtol=tol,
                atol=0.0,
                restart=50,
                maxiter=max(200, maxiter // 50),
                M=M,
            )
            res_g = float(np.linalg.norm(B[:, j] - op.matvec(xg))) / max(bnorm[j], _TINY)
            if res_g < true_res[j]:
                X[:, j] = xg
                true_res[j] = res_g
    return BlockSolveResult(
        x=X,
        converged=true_res <= tol,
        iterations=iterations,
        residual=true_res,
        method=method,
        breakdown=tuple(breakdown),
    )


class JacobiRowPreconditioner:
    """P = diag(A A^H)^(-1): inverse squared row norms, row-space SPD."""

    def __init__(self, op: SparseOperator):
        rn = op.row_norms_sq()
        rn[rn < _TINY] = 1.0
        self._inv = 1.0 / rn

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return self._inv[:, None] * r if r.ndim == 2 else self._inv * r


class PoissonDST:
    """Shifted-Poisson solve on the interior subgrid, DST-I diagonalized.

    Applies (-Lap_h + shift)^(-power) to vectors indexed over the
    strictly interior nodes in linear order (first axis fastest); 2-D
    input is treated as a block of columns.  Hermitian positive definite
    for shift > 0, hence admissible as a normal-equation preconditioner.
    """

    def __init__(self, grid, shift: float, power: int = 2):
        if shift <= 0:
            raise ValueError(f"shift must be positive, got {shift}")
        n1, n2, n3 = grid.shape
        self._ishape = (n1 - 2, n2 - 2, n3 - 2)
        h = grid.spacing
        eigs = []
        for axis in range(3):
            ni = grid.shape[axis] - 2
            m = np.arange(1, ni + 1)
            eigs.append((2.0 - 2.0 * np.cos(np.pi * m / (ni + 1))) / h[axis] ** 2)
        lam = (
            eigs[0][:, None, None] + eigs[1][None, :, None] + eigs[2][None, None, :]
        )
        self._scale = 1.0 / (lam + shift) ** power

    def _apply_real(self, v: np.ndarray) -> np.ndarray:
        ni1, ni2, ni3 = self._ishape
        if v.ndim == 2:
            K = v.shape[1]
            cube = v.reshape(ni3, ni2, ni1, K).transpose(2, 1, 0, 3)
            hat = scipy.fft.dstn(cube, type=1, norm="ortho", axes=(0, 1, 2))
            hat *= self._scale[..., None]
            out = scipy.fft.idstn(hat, type=1, norm="ortho", axes=(0, 1, 2))
            return out.transpose(2, 1, 0, 3).reshape(-1, K)
        cube = v.reshape(ni3, ni2, ni1).transpose(2, 1, 0)
        hat = scipy.fft.dstn(cube, type=1, norm="ortho")
        hat *= self._scale
        out = scipy.fft.idstn(hat, type=1, norm="ortho")
        return out.transpose(2, 1, 0).reshape(-1)

    def __call__(self, r: np.ndarray) -> np.ndarray:
        if np.iscomplexobj(r):
            return self._apply_real(np.ascontiguousarray(r.real)) + 1j * self._apply_real(
                np.ascontiguousarray(r.imag)
            )
        return self._apply_real(r)


def _resolve_row_preconditioner(op: SparseOperator, preconditioner):
    if preconditioner == "jacobi":
        return JacobiRowPreconditioner(op)
    if callable(preconditioner):
        return preconditioner
    raise ValueError(f"unknown preconditioner {preconditioner!r}")


def solve_min_norm(
    op: SparseOperator,
    b: np.ndarray,
    tol: float = 1e-8,
    maxiter: int = 20000,
    preconditioner: Callable[[np.ndarray], np.ndarray] | str = "jacobi",
) -> SolveResult:
    """Minimum-norm solution of a consistent (possibly wide) system.

    Preconditioned CG on A A^H y = b carrying x = A^H y.  The returned
    residual is the true relative residual ||b - A x|| / ||b||; the
    minimum-norm property holds because x never leaves range(A^H).
    """
    res = solve_min_norm_block(
        op, np.asarray(b)[:, None], tol=tol, maxiter=maxiter, preconditioner=preconditioner
    )
    return res.column(0)


def solve_min_norm_block(
    op: SparseOperator,
    B: np.ndarray,
    tol: float = 1e-8,
    maxiter: int = 20000,
    preconditioner: Callable[[np.ndarray], np.ndarray] | str = "jacobi",
) -> BlockSolveResult:
    """Lockstep CG on A A^H over the columns of B, carrying X = A^H Y.

    Per-column step sizes; converged columns freeze.  The preconditioner
    must be Hermitian positive definite on the row space and accept
    (m, K) blocks.
    """
    m, n = op.shape
    B = np.asarray(B)
    if B.ndim != 2 or B.shape[0] != m:
        raise ValueError(f"rhs block must have shape (m, K), got {B.shape}")
    K = B.shape[1]
    prec = _resolve_row_preconditioner(op, preconditioner)

    dtype = np.result_type(op.data.dtype, B.dtype)
    bnorm = np.linalg.norm(B, axis=0)
    X = np.zeros((n, K), dtype=dtype)
    R = B.astype(dtype, copy=True)
    Z = prec(R)
    D = Z.copy()
    rz = np.real(np.sum(np.conj(R) * Z, axis=0))
    breakdown: list[str | None] = [None] * K
    iterations = np.zeros(K, dtype=int)
    active = bnorm > 0.0
    resnorm = np.where(bnorm > 0, 1.0, 0.0)

    it = 0
    while np.any(active) and it < maxiter:
        it += 1
        a = active
        W = op.rmatvec(D[:, a])
        KD = op.matvec(W)
        dkd = np.real(np.sum(np.conj(D[:, a]) * KD, axis=0))
        bad = (dkd <= _TINY * bnorm[a] ** 2) | (rz[a] <= 0.0)
        if np.any(bad):
            for j in np.flatnonzero(a)[bad]:
                breakdown[j] = "curvature"
                iterations[j] = it
            keep = ~bad
            live = np.flatnonzero(a)[keep]
            active = np.zeros_like(active)
            active[live] = True
            a = active
            if not np.any(a):
                break
            W = W[:, keep]
            KD = KD[:, keep]
            dkd = dkd[keep]
        al = rz[a] / dkd
        X[:, a] = X[:, a] + al[None, :] * W
        R[:, a] = R[:, a] - al[None, :] * KD
        rn = np.linalg.norm(R[:, a], axis=0)
        resnorm[a] = rn / np.maximum(bnorm[a], _TINY)
        done = rn <= tol * bnorm[a]
        if np.any(done):
            sel = np.flatnonzero(a)[done]
            iterations[sel] = it
            live = np.flatnonzero(a)[~done]
            active = np.zeros_like(active)
            active[live] = True
            a = active
            if not np.any(a):
                break
        Znew = prec(R[:, a])
        rz_new = np.real(np.sum(np.conj(R[:, a]) * Znew, axis=0))
        beta = rz_new / np.maximum(rz[a], _TINY)
        D[:, a] = Znew + beta[None, :] * D[:, a]
        rz[a] = rz_new
    iterations[active] = it

    true_res = np.linalg.norm(B - op.matvec(X), axis=0) / np.maximum(bnorm, _TINY)
    true_res[bnorm == 0.0] = 0.0
    return BlockSolveResult(
        x=X,
        converged=true_res <= tol,
        iterations=iterations,
        residual=true_res,
        method="cgne",
        breakdown=tuple(breakdown),
    )


def _lu_solve(lu, factor_complex: bool, B: np.ndarray) -> np.ndarray:
    """Apply a SuperLU factorization to a (n, K) block, handling the
    real-factorization / complex-rhs mismatch by splitting parts."""
    if np.iscomplexobj(B) and not factor_complex:
        real = lu.solve(np.ascontiguousarray(B.real))
        imag = lu.solve(np.ascontiguousarray(B.imag))
        X = real + 1j * imag
    else:
        dtype = complex if factor_complex else float
        X = lu.solve(np.ascontiguousarray(B, dtype=dtype))
    if X.ndim == 1:
        X = X[:, None]
    return X


def row_equilibrate(op: SparseOperator) -> tuple[SparseOperator, np.ndarray]:
    """Scale each row to unit max magnitude; returns (scaled op, row scale).

    Row scaling leaves the solution set of A x = b untouched (apply the
    scale to b as well) and, for underdetermined systems, preserves the
    minimum-norm solution exactly, while collapsing the dynamic range
    between band rows and gauge-branch rows.  Zero rows keep scale 1.
    """
    A = op.to_scipy().tocsr()
    n_rows = A.shape[0]
    row_max = np.ones(n_rows)
    if A.data.size:
        starts = np.minimum(A.indptr[:-1], A.data.size - 1)
        maxima = np.maximum.reduceat(np.abs(A.data), starts)
        nonempty = np.diff(A.indptr) > 0
        row_max[nonempty] = maxima[nonempty]
    scale = 1.0 / np.maximum(row_max, _TINY)
    As = (scipy.sparse.diags(scale) @ A).tocsr()
    return SparseOperator(As.indptr, As.indices, As.data, As.shape), scale


def _refine(lu, factor_complex: bool, apply_op: Callable, B: np.ndarray, tol: float,
            max_refine: int = 4) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """LU solve plus iterative refinement on apply_op(X) = B.

    Returns (X, residual, rounds); residual is per-column relative to
    ||B||.  Refinement stops per call once every column meets tol or the
    worst column stops halving.
    """
    X = _lu_solve(lu, factor_complex, B)
    bnorm = np.linalg.norm(B, axis=0)
    denom = np.maximum(bnorm, _TINY)
    R = B - apply_op(X)
    res = np.linalg.norm(R, axis=0) / denom
    rounds = np.ones(B.shape[1], dtype=int)
    for _ in range(max_refine):
        if np.all(res <= tol):
            break
        X_new = X + _lu_solve(lu, factor_complex, R)
        R_new = B - apply_op(X_new)
        res_new = np.linalg.norm(R_new, axis=0) / denom
        improved = res_new < res
        if not np.any(improved):
            break
        X[:, improved] = X_new[:, improved]
        R[:, improved] = R_new[:, improved]
        rounds[improved] += 1
        stalled = np.all(res_new[improved] > 0.5 * res[improved])
        res = np.where(improved, res_new, res)
        if stalled:
            break
    res[bnorm == 0.0] = 0.0
    return X, res, rounds


class FactorizedMinNorm:
    """Direct minimum-norm solver for a consistent (possibly wide) system.

    Row-equilibrates A, factorizes the Hermitian Gram operator
    As As^H once with a sparse LU, and answers each right-hand side as
    x = As^H (As As^H)^{-1} (s b) with iterative refinement on the Gram
    solve — the same minimum-norm solution the CG route converges to
    (row scaling changes neither the constraint set nor the norm being
    minimized).  Worth the factorization cost when many right-hand
    sides share one operator.  The reported residual is relative to the
    equilibrated system.

    Exactly-zero rows (equations voided by support truncation or by
    coefficients below float range) get a unit Gram diagonal so the
    factorization exists; the corresponding Gram component never enters
    x = As^H y, and the refinement residual — computed with the true
    operator — still exposes an inconsistent right-hand side there.
    """

    def __init__(self, op: SparseOperator):
        scaled, scale = row_equilibrate(op)
        self._scale = scale
        self._As = scaled.to_scipy().tocsr()
        self._AsH = self._As.conjugate().transpose().tocsr()
        gram = (self._As @ self._AsH).tocsc()
        zero_rows = np.asarray(np.abs(self._As).sum(axis=1)).ravel() == 0.0
        if np.any(zero_rows):
            gram = (gram + scipy.sparse.diags(zero_rows.astype(float))).tocsc()
        self._lu = scipy.sparse.linalg.splu(gram)
        self._factor_complex = bool(np.iscomplexobj(gram.data))
        self._shape = op.shape

    def solve_block(self, B: np.ndarray, tol: float = 1e-8) -> BlockSolveResult:
        B = np.asarray(B)
        if B.ndim == 1:
            B = B[:, None]
        if B.shape[0] != self._shape[0]:
            raise ValueError(f"rhs block must have shape (m, K), got {B.shape}")
        Bs = self._scale[:, None] * B
        gram_apply = lambda Y: self._As @ (self._AsH @ Y)
        Y, res, rounds = _refine(self._lu, self._factor_complex, gram_apply, Bs, tol)
        X = self._AsH @ Y
        K = B.shape[1]
        return BlockSolveResult(
            x=X,
            converged=res <= tol,
            iterations=rounds,
            residual=res,
            method="gram-lu",
            breakdown=(None,) * K,
        )

    def solve(self, b: np.ndarray, tol: float = 1e-8) -> SolveResult:
        return self.solve_block(np.asarray(b), tol=tol).column(0)


class FactorizedSquare:
    """Sparse-LU factorization of a square operator, reusable across solves.

    Row-equilibrates before factorizing and polishes each solve with
    iterative refinement; the reported residual is relative to the
    equilibrated system (a row-weighted backward error of the original).

    Exactly-zero rows (equations voided by coefficients below float
    range, e.g. deep in a conjugated gauge branch) are factorized with
    a unit diagonal, which pins those solution components to the scaled
    right-hand side there — zero for every consistent input — while the
    refinement residual, computed with the true operator, still exposes
    an inconsistent right-hand side.
    """

    def __init__(self, op: SparseOperator):
        m, n = op.shape
        if m != n:
            raise ValueError(f"square factorization needs a square operator, got {op.shape}")
        scaled, scale = row_equilibrate(op)
        self._scale = scale
        self._As = scaled.to_scipy().tocsr()
        factor = self._As
        zero_rows = np.asarray(np.abs(factor).sum(axis=1)).ravel() == 0.0
        if np.any(zero_rows):
            factor = (factor + scipy.sparse.diags(zero_rows.astype(float))).tocsr()
        self._lu = scipy.sparse.linalg.splu(factor.tocsc())
        self._factor_complex = bool(np.iscomplexobj(factor.data))
        self._shape = op.shape

    def solve_block(self, B: np.ndarray, tol: float = 1e-10) -> BlockSolveResult:
        B = np.asarray(B)
        if B.ndim == 1:
            B = B[:, None]
        if B.shape[0] != self._shape[0]:
            raise ValueError(f"rhs block must have shape (n, K), got {B.shape}")
        Bs = self._scale[:, None] * B
        X, res, rounds = _refine(
            self._lu, self._factor_complex, lambda Z: self._As @ Z, Bs, tol
        )
        K = B.shape[1]
        return BlockSolveResult(
            x=X,
            converged=res <= tol,
            iterations=rounds,
            residual=res,
            method="lu",
            breakdown=(None,) * K,
        )

    def solve(self, b: np.ndarray, tol: float = 1e-10) -> SolveResult:
        return self.solve_block(np.asarray(b), tol=tol).column(0)
