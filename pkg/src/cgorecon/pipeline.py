"""Reconstruction pipeline: boundary functional, moment extraction, inversion.

The chain is: build a pair of conjugate-phase test solutions for the
known background potential, push the trace of one of them through the
measured boundary map of the unknown potential, pair the two resulting
Cauchy records on the accessible patch, and read off a mollified plane
integral of the potential difference.  Sweeping planes over a direction
cone turns those moments into Radon samples, and a regularized local
Radon inversion returns the difference on the support ball.

Discrete exactness.  Every solve in the pipeline uses the exactly
conjugated stencil (``conjugated_stencil``), so each realized field
satisfies the same discrete Schrodinger equations an ordinary Dirichlet
solve of its potential enforces, and every Neumann trace is the
variational energy flux.  For such records the antisymmetric boundary
pairing equals the volume pairing of the potential difference against
the product of the two solutions *identically* — no flux-consistency
error, no conjugation-expansion error — so the moment estimate differs
from the discrete mollified moment only by remainder cross terms, which
the Carleman mechanism drives to zero as tau grows.

Large-phase bookkeeping.  Realized solutions carry the factor
e^{tau Phi}; on the accessible patch the gauge part of Phi makes this
factor astronomically large except on the core height band where the
gauge vanishes.  Every profile used here is supported strictly inside
that band, the free boundary columns of the test solutions are
restricted to it, and the measured-map simulation solves in amplitude
variables, so each realized Cauchy record is materialized exactly where
its data lives and is exactly zero elsewhere.  Paired records have
phases summing to twice the gauge, which is identically zero on the
band: the pairing never sees a growing exponential.

The measured boundary map is simulated by ``ConjugatedDtnOracle``,
which holds the true potential privately; extraction and reconstruction
receive only the background potential and the oracle callback, so the
pipeline cannot peek at the ground truth.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse

from .cgo import (
    REALIZE_EXPONENT_CAP,
    REMAINDER_SUPPORT_LOG,
    Amplitude,
    CgoSolution,
    RemainderReport,
    RemainderSystem,
    _potential_values,
    chi_sq_mass,
    make_amplitude,
    remainder_system,
    squared_profile,
    stencil_phase,
)
from .fields import BoundaryField, ScalarField
from .forward import (
    CauchyRecord,
    assemble_energy,
    interior_ids,
    schrodinger_interior_rows,
    split_interior_rows,
)
from .geometry import BoundaryNodes, Frame, Grid, Plane, boundary_decompose
from .radon import (
    DirectionSet,
    RadonInvertReport,
    RadonSample,
    plane_row,
    radon_invert,
)
from .solvers import (
    FactorizedMinNorm,
    FactorizedSquare,
    SparseOperator,
    row_equilibrate,
    solve_min_norm_block,
    solve_square,
)
from .weights import WeightSpec, f_lambda


def boundary_functional(cauchy1: CauchyRecord, cauchy2: CauchyRecord) -> complex:
    """Antisymmetric Cauchy pairing I = sum_Gamma w (d2 n1 - d1 n2).

    For flux-mode records of discrete solutions this equals the volume
    pairing sum w_vol (q1 - q2) u1 u2 exactly (up to solver residual):
    the surface weights cancel against the stored flux normalization and
    the symmetric energy matrices of the two potentials differ by the
    diagonal of w_vol (q1 - q2).  Both records must live on the same
    boundary enumeration with the same accessible patch and the same
    flux mode; off-patch entries are zero by the record contract, so
    the sum genuinely only reads the patch.

    Exactly antisymmetric: swapping the records negates every summand.
    """
    b1, b2 = cauchy1.boundary, cauchy2.boundary
    if b1 is not b2:
        same = (
            len(b1) == len(b2)
            and np.array_equal(b1.index, b2.index)
            and np.array_equal(b1.in_gamma, b2.in_gamma)
            and np.array_equal(b1.weight, b2.weight)
        )
        if not same:
            raise ValueError(
                "Cauchy records must share one boundary enumeration and accessible patch"
            )
    if cauchy1.mode != cauchy2.mode:
        raise ValueError(
            f"Cauchy records must use the same flux mode, got "
            f"{cauchy1.mode!r} and {cauchy2.mode!r}"
        )
    w = b1.weight * b1.in_gamma
    terms = cauchy2.dirichlet * cauchy1.neumann - cauchy1.dirichlet * cauchy2.neumann
    return complex(np.sum(w * terms))


@dataclass(frozen=True)
class AmplitudeCauchy:
    """Cauchy pair of a realized field e^{tau Phi} a, in amplitude variables.

    dirichlet holds the amplitude trace on the full boundary
    enumeration; neumann holds the amplitude-level variational flux
    (energy-matrix rows with the boundary node's exponential factored
    out, divided by the surface weight), computed on the accessible
    rows where the phase increments are representable and zero
    elsewhere.  ``realize`` materializes the exponential on the height
    band where the gauge profile vanishes and returns a standard
    flux-mode Cauchy record that is exactly zero elsewhere — exact for
    every pairing against data supported in the band, and the only
    representation available at all once tau times the gauge exceeds
    float range.
    """

    weight: WeightSpec
    tau: float
    boundary: BoundaryNodes
    dirichlet: np.ndarray
    neumann: np.ndarray
    phase: np.ndarray

    def realize(
        self, band: float, exponent_cap: float = REALIZE_EXPONENT_CAP
    ) -> CauchyRecord:
        """Materialize the record on the zero-gauge band |x3_frame| <= band.

        Raises if the stored Dirichlet data lives outside the band or
        leaks off the accessible patch, or if the exponential overflows
        on the band — each of those means the pair cannot represent a
        measurement of band-supported data.
        """
        band = float(band)
        if band <= 0.0:
            raise ValueError(f"band must be positive, got {band}")
        local = self.weight.frame.world_to_frame(self.boundary.coords)
        in_band = np.abs(local[:, 2]) <= band + 1e-12
        if np.any(self.dirichlet[~in_band] != 0):
            raise ValueError(
                "Dirichlet amplitude data extends outside the realization band; "
                "widen the band or shrink the profile support"
            )
        if np.any(self.dirichlet[~self.boundary.in_gamma] != 0):
            raise ValueError(
                "Dirichlet amplitude data leaks off the accessible patch; the "
                "direction frame is too oblique for this box (frame validity)"
            )
        phi = self.phase
        if np.any(in_band):
            worst = float(np.max(self.tau * phi[in_band].real))
            if worst > exponent_cap:
                raise ValueError(
                    f"realizing the Cauchy record would overflow: max tau*Re(Phi) "
                    f"= {worst:.3g} on the band exceeds cap {exponent_cap:g}"
                )
        factor = np.zeros(len(self.boundary), dtype=complex)
        factor[in_band] = np.exp(self.tau * phi[in_band])
        dirichlet = self.dirichlet * factor
        neumann = np.where(self.boundary.in_gamma, self.neumann * factor, 0.0)
        return CauchyRecord(self.boundary, dirichlet, neumann, mode="flux")


@dataclass(frozen=True)
class FluxRecorder:
    """Amplitude-level flux record builder for one potential on one grid.

    Stores the boundary rows of the symmetric energy matrix; a record's
    Neumann entry at boundary node i is

        f_i = sum_j K_ij e^{tau (Phi_j - Phi_i)} a_j / w_i,

    i.e. the variational flux of the realized field with the node's own
    exponential factored out.  Rows whose phase increments exceed the
    representable range are zeroed — they lie deep in the gauge branches
    where no paired record can carry data, so those zeros are never
    read by a pairing.
    """

    grid: Grid
    boundary: BoundaryNodes
    kb_indptr: np.ndarray
    kb_indices: np.ndarray
    kb_data: np.ndarray

    @staticmethod
    def build(grid: Grid, q_values: np.ndarray, boundary: BoundaryNodes) -> "FluxRecorder":
        kb = assemble_energy(grid, np.asarray(q_values)).to_scipy().tocsr()[
            boundary.index
        ]
        return FluxRecorder(
            grid=grid,
            boundary=boundary,
            kb_indptr=kb.indptr,
            kb_indices=kb.indices,
            kb_data=kb.data,
        )

    def record(
        self,
        weight: WeightSpec,
        tau: float,
        amp: np.ndarray,
        phi: np.ndarray | None = None,
    ) -> AmplitudeCauchy:
        """Amplitude Cauchy pair of the field e^{tau Phi} amp.

        amp is the full-grid amplitude in (n1, n2, n3) index order; phi
        caches phase values at all nodes for callers building many
        records with one weight.
        """
        if phi is None:
            phi = stencil_phase(weight, tau, self.grid)
        amp_flat = self.grid._to_linear(np.asarray(amp))
        tau = float(tau)
        n_rows = len(self.boundary)
        counts = np.diff(self.kb_indptr)
        row_phi = np.repeat(phi[self.boundary.index], counts)
        exponents = tau * (phi[self.kb_indices] - row_phi)
        re = exponents.real
        ok_entry = re <= REALIZE_EXPONENT_CAP
        factors = np.zeros(exponents.shape, dtype=complex)
        factors[ok_entry] = np.exp(exponents[ok_entry])
        weighted = self.kb_data * factors * amp_flat[self.kb_indices]
        sums = np.zeros(n_rows, dtype=complex)
        np.add.at(sums, np.repeat(np.arange(n_rows), counts), weighted)
        row_ok = np.ones(n_rows, dtype=bool)
        np.logical_and.at(row_ok, np.repeat(np.arange(n_rows), counts), ok_entry)
        neumann = np.where(
            self.boundary.in_gamma & row_ok, sums / self.boundary.weight, 0.0
        )
        s = self.boundary.subscripts
        dirichlet = np.asarray(amp)[s[:, 0], s[:, 1], s[:, 2]].astype(complex)
        return AmplitudeCauchy(
            weight=weight,
            tau=tau,
            boundary=self.boundary,
            dirichlet=dirichlet,
            neumann=neumann,
            phase=phi[self.boundary.index],
        )


def _weight_key(weight: WeightSpec, tau: float) -> tuple:
    """Hashable identity of (weight, tau) for factorization caching."""
    dom = weight.domain
    return (
        tuple(dom.half_widths),
        dom.t1,
        dom.t2,
        dom.d1,
        dom.d2,
        dom.v_radius,
        weight.k,
        weight.lam,
        weight.sign,
        tuple(np.asarray(weight.frame.rotation).reshape(-1).tolist()),
        float(tau),
    )


class ConjugatedDtnOracle:
    """Simulated local boundary-measurement map of a hidden true potential.

    Callable as ``oracle(weight, tau, dirichlet)`` with amplitude
    Dirichlet data over the boundary enumeration (zero off the
    accessible patch): solves the interior exactly-conjugated system for
    the true potential and returns the amplitude Cauchy pair of the
    realized solution e^{tau Phi} a, with the variational energy flux of
    the true potential as the Neumann side.  The realized field
    satisfies the ordinary discrete Schrodinger system of the true
    potential with the realized trace as data, so the returned pair
    carries exactly the information a discrete boundary measurement of
    this data would; solving in amplitude variables is what makes the
    simulation computable at large tau.

    Thread-safe for concurrent use; a single-slot cache keeps the most
    recent (weight, tau) factorization, so sweeping the offsets of one
    plane family reuses one interior factorization.
    """

    def __init__(
        self,
        q_true,
        *,
        boundary: BoundaryNodes | None = None,
        method: str = "direct",
        tol: float = 1e-11,
        maxiter: int = 60000,
    ):
        grid, values = _potential_values(q_true, "q_true")
        if method not in ("direct", "iterative"):
            raise ValueError(f"method must be 'direct' or 'iterative', got {method!r}")
        self._grid = grid
        self._values = np.asarray(values)
        self._boundary = boundary if boundary is not None else boundary_decompose(grid)
        self._method = method
        self._tol = float(tol)
        self._maxiter = int(maxiter)
        self._recorder = FluxRecorder.build(grid, self._values, self._boundary)
        self._lock = threading.Lock()
        self._cache_key: tuple | None = None
        self._cache_val: tuple | None = None

    @property
    def grid(self) -> Grid:
        return self._grid

    @property
    def boundary(self) -> BoundaryNodes:
        return self._boundary

    def _system(self, weight: WeightSpec, tau: float):
        key = _weight_key(weight, tau)
        if self._cache_key == key:
            return self._cache_val
        grid = self._grid
        # The interior solve runs in realized variables: the field
        # u = e^{tau Phi} a satisfies the plain (-Lap_h + q) rows, whose
        # conditioning is tau-independent, and within the gauge-support
        # region every realized quantity is representable (the data is
        # band-supported and the kept exponents stay moderate).  The
        # rows are truncated at the same support cut the test solutions
        # use: beyond it unknowns are pinned to exact zero via identity
        # rows, so the solved field vanishes at every row a matching
        # truncated test solution leaves unsolved and the pairing of
        # the two stays an exact volume identity.
        op = schrodinger_interior_rows(grid, self._values)
        a_ii, a_ib = split_interior_rows(grid, op, self._boundary)
        phi = stencil_phase(weight, tau, grid)
        int_ids = interior_ids(grid)
        heights = weight.frame.world_to_frame(grid.points())[:, 2]
        gauge = f_lambda(weight, heights)[0]
        keep = 2.0 * tau * gauge[int_ids] <= REMAINDER_SUPPORT_LOG
        A = a_ii.to_scipy().tocsr()
        A = (
            scipy.sparse.diags(keep.astype(float)) @ A
            + scipy.sparse.diags((~keep).astype(float))
        ).tocsr()
        a_mod = SparseOperator(A.indptr, A.indices, A.data, A.shape)
        if self._method == "direct":
            engine, scale = FactorizedSquare(a_mod), None
        else:
            engine, scale = row_equilibrate(a_mod)
        self._cache_key = key
        self._cache_val = (engine, scale, a_ib, phi, keep)
        return self._cache_val

    def __call__(
        self, weight: WeightSpec, tau: float, dirichlet: np.ndarray | BoundaryField
    ) -> AmplitudeCauchy:
        gv = dirichlet.values if isinstance(dirichlet, BoundaryField) else np.asarray(dirichlet)
        if gv.shape != (len(self._boundary),):
            raise ValueError(
                f"Dirichlet data must match the boundary enumeration "
                f"({len(self._boundary)} nodes), got shape {gv.shape}"
            )
        if np.any(gv[~self._boundary.in_gamma] != 0):
            raise ValueError("Dirichlet data must vanish off the accessible patch")
        tau = float(tau)
        with self._lock:
            engine, scale, a_ib, phi, keep = self._system(weight, tau)
            int_ids = interior_ids(self._grid)
            phi_b = phi[self._boundary.index]
            nz = gv != 0
            if np.any(nz):
                worst = float(np.max(tau * phi_b[nz].real))
                if worst > REALIZE_EXPONENT_CAP:
                    raise ValueError(
                        f"Dirichlet data cannot be realized: max tau*Re(Phi) = "
                        f"{worst:.3g} on its support exceeds cap "
                        f"{REALIZE_EXPONENT_CAP:g}"
                    )
            realized_g = np.zeros(len(self._boundary), dtype=complex)
            realized_g[nz] = gv[nz] * np.exp(tau * phi_b[nz])
            rhs = -a_ib.matvec(realized_g)
            rhs = np.where(keep, rhs, 0.0)
            if self._method == "direct":
                res = engine.solve(rhs, tol=self._tol)
            else:
                res = solve_square(engine, scale * rhs, tol=self._tol, maxiter=self._maxiter)
        if not res.converged:
            raise RuntimeError(
                f"measured-map interior solve did not converge: method={res.method}, "
                f"residual={res.residual:.3e} (tol {self._tol:g})"
            )
        amp_int = np.zeros(int_ids.size, dtype=complex)
        amp_int[keep] = res.x[keep] * np.exp(-tau * phi[int_ids[keep]])
        flat = np.zeros(self._grid.n_nodes, dtype=complex)
        flat[int_ids] = amp_int
        flat[self._boundary.index] = gv
        amp = self._grid._from_linear(flat)
        record = self._recorder.record(weight, tau, amp, phi=phi)
        return AmplitudeCauchy(
            weight=weight,
            tau=tau,
            boundary=self._boundary,
            dirichlet=np.array(gv, dtype=complex),
            neumann=record.neumann,
            phase=record.phase,
        )


def make_dtn_oracle(
    q_true,
    *,
    boundary: BoundaryNodes | None = None,
    method: str = "direct",
    tol: float = 1e-11,
    maxiter: int = 60000,
) -> ConjugatedDtnOracle:
    """Wrap a true potential as a measured-boundary-map simulator."""
    return ConjugatedDtnOracle(
        q_true, boundary=boundary, method=method, tol=tol, maxiter=maxiter
    )


@dataclass(frozen=True)
class MomentRecord:
    """One extracted plane moment.

    i_tau is the raw pairing value; estimate = i_tau / int chi_w^2 is
    the plane integral of the potential difference mollified by the
    normalized squared profile and weighted by h(z)^2 (for h_index = 1
    simply the mollified plane integral).
    """

    plane: Plane
    h_index: int
    tau: float
    i_tau: complex
    estimate: complex


def _holomorphic_coefficients(h_index: int) -> list[float]:
    if int(h_index) != h_index or h_index < 1:
        raise ValueError(f"h_index must be a positive integer, got {h_index}")
    return [0.0] * (int(h_index) - 1) + [1.0]


def _validate_trace_support(
    boundary: BoundaryNodes, weight: WeightSpec, center: float, width: float
) -> None:
    """Fail fast if a profile's boundary trace would leak off the patch.

    The test solutions' traces live where the profile is nonzero,
    |x3_frame - center| < width; every boundary node outside the
    accessible patch must sit clear of that interval, otherwise the
    construction would require data on the inaccessible boundary.
    """
    local = weight.frame.world_to_frame(boundary.coords)
    off = ~boundary.in_gamma
    if not np.any(off):
        return
    worst = float(np.min(np.abs(local[off, 2] - center)))
    if worst <= width:
        raise ValueError(
            f"profile support [{center - width:g}, {center + width:g}] along this "
            f"frame reaches inaccessible boundary nodes (closest at frame-height "
            f"distance {worst:g} from the profile center); the direction is too "
            f"oblique for this box or the offset/width too large (frame validity)"
        )


@dataclass(frozen=True)
class _FamilySolver:
    """One rectangular exactly-conjugated system plus its solve engine.

    Right-hand sides use the discrete form (operator applied to the
    nodal profile), so every solved amplitude satisfies the same
    interior equations the measurement simulation solves; the iterative
    route solves the row-equilibrated system (same minimum-norm
    solution, tame Gram conditioning).  ``phi`` caches the phase values
    at all grid nodes for this weight.
    """

    system: RemainderSystem
    engine: FactorizedMinNorm | None
    phi: np.ndarray

    def solve(
        self, amplitudes: list[Amplitude], tol: float, maxiter: int
    ) -> list[CgoSolution]:
        B = np.column_stack([self.system.rhs_discrete(a) for a in amplitudes])
        if self.engine is not None:
            blk = self.engine.solve_block(B, tol=tol)
        else:
            scaled, scale = row_equilibrate(self.system.operator)
            blk = solve_min_norm_block(
                scaled, scale[:, None] * B, tol=tol, maxiter=maxiter,
                preconditioner="jacobi",
            )
        solutions = []
        for j, amp in enumerate(amplitudes):
            col = blk.column(j)
            report = RemainderReport.from_solve(
                col, self.system.rhs_norm(B[:, j]), self.system.tau
            )
            if not col.converged:
                raise RuntimeError(
                    f"remainder solve did not converge: method={report.method}, "
                    f"residual={report.residual:.3e}, tau={self.system.tau:g}, "
                    f"profile center {amp.center:g}"
                )
            solutions.append(self.system.solution(amp, col.x, report))
        return solutions


def _family_solver(
    q_star,
    weight: WeightSpec,
    tau: float,
    boundary: BoundaryNodes,
    gamma_band: float,
    method: str,
) -> _FamilySolver:
    system = remainder_system(
        q_star, weight, tau, boundary=boundary, gamma_band=gamma_band, form="stencil"
    )
    engine = FactorizedMinNorm(system.operator) if method == "direct" else None
    phi = stencil_phase(weight, tau, system.grid)
    return _FamilySolver(system, engine, phi)


def _pair_and_normalize(
    sol_plus: CgoSolution,
    sol_minus: CgoSolution,
    oracle,
    recorder_star: FluxRecorder,
    phi_minus: np.ndarray,
    boundary: BoundaryNodes,
    band: float,
    plane: Plane,
    h_index: int,
    tau: float,
    width: float,
) -> MomentRecord:
    """Measured pairing and normalization for one solved test pair."""
    trace = sol_plus.total_amplitude().values
    s = boundary.subscripts
    g_plus = trace[s[:, 0], s[:, 1], s[:, 2]].astype(complex)
    g_plus[~boundary.in_gamma] = 0.0
    measured = oracle(sol_plus.weight, tau, g_plus)
    if len(measured.boundary) != len(boundary):
        raise ValueError("oracle boundary enumeration does not match the grid")
    pair_minus = recorder_star.record(
        sol_minus.weight, tau, sol_minus.total_amplitude().values, phi=phi_minus
    )
    c1 = measured.realize(band)
    c2 = pair_minus.realize(band)
    i_tau = boundary_functional(c1, c2)
    if not (np.isfinite(i_tau.real) and np.isfinite(i_tau.imag)):
        raise RuntimeError(f"non-finite pairing value {i_tau!r}")
    estimate = i_tau / chi_sq_mass(width)
    return MomentRecord(
        plane=plane,
        h_index=int(h_index),
        tau=float(tau),
        i_tau=i_tau,
        estimate=estimate,
    )


def extract_plane_moment(
    q_star,
    oracle,
    plane: Plane,
    h_index: int,
    tau: float,
    width: float,
    *,
    weight: WeightSpec | None = None,
    gamma_band: float | None = None,
    tol: float = 1e-9,
    maxiter: int = 20000,
    method: str = "iterative",
    boundary: BoundaryNodes | None = None,
) -> MomentRecord:
    """Extract one mollified plane moment of (q_true - q_star).

    Builds the conjugate-phase pair of test solutions for the background
    potential with the plane's frame and offset, obtains the measured
    response to the trace of the plus-phase solution through the oracle,
    forms the antisymmetric Cauchy pairing on the accessible patch, and
    normalizes by the squared-profile mass.  Only the background
    potential and the oracle callback are consulted — never the true
    potential.
    """
    grid, q_vals = _potential_values(q_star, "q_star")
    if boundary is None:
        boundary = boundary_decompose(grid)
    dom = grid.domain
    if weight is None:
        weight = WeightSpec(dom, k=1, lam=1.0)
    if method not in ("direct", "iterative"):
        raise ValueError(f"method must be 'direct' or 'iterative', got {method!r}")
    band = float(gamma_band) if gamma_band is not None else min(dom.t1, dom.t2)
    tau = float(tau)
    width = float(width)
    w_plus = replace(weight, frame=plane.frame, sign=+1)
    _validate_trace_support(boundary, w_plus, float(plane.offset), width)
    coeffs = _holomorphic_coefficients(h_index)
    amp_plus = make_amplitude(w_plus, coeffs, float(plane.offset), width)
    amp_minus = make_amplitude(w_plus.conjugate(), coeffs, float(plane.offset), width)

    solver_plus = _family_solver(q_star, w_plus, tau, boundary, band, method)
    solver_minus = _family_solver(
        q_star, w_plus.conjugate(), tau, boundary, band, method
    )
    sol_plus = solver_plus.solve([amp_plus], tol, maxiter)[0]
    sol_minus = solver_minus.solve([amp_minus], tol, maxiter)[0]
    recorder_star = FluxRecorder.build(grid, q_vals, boundary)
    return _pair_and_normalize(
        sol_plus,
        sol_minus,
        oracle,
        recorder_star,
        solver_minus.phi,
        boundary,
        band,
        plane,
        h_index,
        tau,
        width,
    )


@dataclass(frozen=True)
class SampleFailure:
    """One dropped (plane, h_index) sample with the reason."""

    plane: Plane
    h_index: int
    message: str


@dataclass(frozen=True)
class ReconstructReport:
    """Diagnostics of one reconstruction run.

    moments holds every extracted record (all h indices); the inversion
    consumed the h_index == 1 subset minus the dropped samples.
    sample_residuals are the per-sample inversion misfits (row dot q_hat
    minus sample value) in the order of the inverted moments.
    """

    tau: float
    width: float
    gamma_band: float
    h_indices: tuple[int, ...]
    moments: tuple[MomentRecord, ...]
    dropped: tuple[SampleFailure, ...]
    invert: RadonInvertReport
    sample_residuals: np.ndarray
    n_samples: int
    n_failed: int


def reconstruct(
    q_star,
    oracle,
    directions: DirectionSet,
    *,
    tau: float,
    width: float,
    mu,
    offsets: np.ndarray | None = None,
    h_indices: tuple[int, ...] = (1,),
    weight: WeightSpec | None = None,
    gamma_band: float | None = None,
    tol: float = 1e-8,
    maxiter: int = 20000,
    method: str = "direct",
    invert_tol: float = 1e-8,
    invert_maxiter: int = 12000,
    drop_limit: float = 0.05,
    boundary: BoundaryNodes | None = None,
) -> tuple[ScalarField, ReconstructReport]:
    """Reconstruct q - q_star on the support ball from measured boundary data.

    For every direction of the cone, one conjugate pair of rectangular
    systems is assembled (and factorized, in the default direct mode)
    once and swept over all plane offsets and h indices; each plane
    yields a mollified plane integral of the potential difference
    through the measured pairing.  The h_index == 1 moments feed a
    regularized local Radon inversion whose rows use the same squared
    transverse profile, so sample model and measurement match; higher h
    moments are extracted and reported but not inverted.  Failed samples
    (non-convergence, non-finite values) are dropped with a report when
    they stay under ``drop_limit`` of the total, and abort the run
    otherwise.
    """
    grid, q_vals = _potential_values(q_star, "q_star")
    if boundary is None:
        boundary = boundary_decompose(grid)
    dom = grid.domain
    if weight is None:
        weight = WeightSpec(dom, k=1, lam=1.0)
    if method not in ("direct", "iterative"):
        raise ValueError(f"method must be 'direct' or 'iterative', got {method!r}")
    h_indices = tuple(int(h) for h in h_indices)
    if 1 not in h_indices:
        raise ValueError("h_indices must include 1: only h=1 moments feed the inversion")
    if offsets is not None:
        offs = np.asarray(offsets, dtype=float)
        directions = DirectionSet(
            normals=directions.normals,
            offsets=tuple(offs.copy() for _ in range(len(directions))),
            half_angle=directions.half_angle,
        )
    band = float(gamma_band) if gamma_band is not None else min(dom.t1, dom.t2)
    tau = float(tau)
    width = float(width)
    recorder_star = FluxRecorder.build(grid, q_vals, boundary)

    moments: list[MomentRecord] = []
    dropped: list[SampleFailure] = []
    inversion_samples: list[RadonSample] = []
    n_samples = 0

    for normal, offs in zip(directions.normals, directions.offsets):
        frame = Frame.from_normal(normal)
        w_plus = replace(weight, frame=frame, sign=+1)
        for c in offs:
            _validate_trace_support(boundary, w_plus, float(c), width)
        labels = []
        amps_plus = []
        amps_minus = []
        for h in h_indices:
            coeffs = _holomorphic_coefficients(h)
            for c in offs:
                labels.append((h, float(c)))
                amps_plus.append(make_amplitude(w_plus, coeffs, float(c), width))
                amps_minus.append(
                    make_amplitude(w_plus.conjugate(), coeffs, float(c), width)
                )
        try:
            solver_plus = _family_solver(q_star, w_plus, tau, boundary, band, method)
            sols_plus = solver_plus.solve(amps_plus, tol, maxiter)
            solver_minus = _family_solver(
                q_star, w_plus.conjugate(), tau, boundary, band, method
            )
            sols_minus = solver_minus.solve(amps_minus, tol, maxiter)
        except RuntimeError as exc:
            n_samples += len(labels)
            for h, c in labels:
                dropped.append(
                    SampleFailure(Plane(frame, c), h, f"direction solve failed: {exc}")
                )
            continue

        for (h, c), sp, sm in zip(labels, sols_plus, sols_minus):
            plane = Plane(frame, c)
            n_samples += 1
            try:
                record = _pair_and_normalize(
                    sp,
                    sm,
                    oracle,
                    recorder_star,
                    solver_minus.phi,
                    boundary,
                    band,
                    plane,
                    h,
                    tau,
                    width,
                )
            except (RuntimeError, ValueError) as exc:
                dropped.append(SampleFailure(plane, h, str(exc)))
                continue
            moments.append(record)
            if h == 1:
                inversion_samples.append(
                    RadonSample(plane=plane, value=float(record.estimate.real), width=width)
                )

    n_failed = len(dropped)
    if n_samples == 0:
        raise RuntimeError("no samples were extracted")
    if n_failed / n_samples >= drop_limit:
        raise RuntimeError(
            f"{n_failed} of {n_samples} samples failed (>= {drop_limit:.0%}); "
            f"first failure: {dropped[0].message}"
        )

    profile = squared_profile(width)
    q_hat, invert_report = radon_invert(
        inversion_samples,
        grid,
        mu,
        profile=profile,
        tol=invert_tol,
        maxiter=invert_maxiter,
    )

    flat = q_hat.flat()
    residuals = np.empty(len(inversion_samples))
    for idx, sample in enumerate(inversion_samples):
        cols, row_weights = plane_row(grid, sample.plane, sample.width, profile)
        residuals[idx] = float(np.real(np.dot(row_weights, flat[cols]))) - sample.value

    report = ReconstructReport(
        tau=tau,
        width=width,
        gamma_band=band,
        h_indices=h_indices,
        moments=tuple(moments),
        dropped=tuple(dropped),
        invert=invert_report,
        sample_residuals=residuals,
        n_samples=n_samples,
        n_failed=n_failed,
    )
    return q_hat, report
