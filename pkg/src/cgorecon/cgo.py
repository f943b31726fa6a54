"""Complex-geometrical-optics solutions in amplitude variables.

A CGO solution has the form u = e^{tau Phi} (v0 + r): a large complex
exponential times a slowly varying amplitude.  The amplitude v0 is a
holomorphic polynomial h(z) of the in-frame coordinate z = x1 + i x2
times a compactly supported 1-D bump chi(x3); on its support the phase
satisfies the eikonal identity <dPhi, dPhi> = 0 and the transport
identity 2 <dPhi, dv0> + (Lap Phi) v0 = 0 exactly, so the conjugated
right-hand side is independent of tau.

The remainder r solves the conjugated equation

    Lap r + 2 tau <dPhi, dr> + (tau^2 <dPhi,dPhi> + tau Lap Phi - q) r
        = -e^{-tau Phi} (Lap - q)(e^{tau Phi} v0)

with r = 0 pinned on the inaccessible boundary and r free on Gamma.
Discretely this is a rectangular system (equations at interior nodes,
unknowns at interior and Gamma nodes) closed by the minimum-norm
solution, which selects the unique remainder orthogonal to the kernel
rather than inventing a boundary condition on Gamma.

Everything is stored and solved in amplitude variables; the exponential
factor is only materialized on demand (``CgoSolution.realize``) with an
overflow guard, and the exact zeros of the amplitude are preserved so
the realized field vanishes identically off Gamma on the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse
from scipy.integrate import quad

from .fields import ScalarField, gradient
from .forward import (
    Potential,
    assemble_interior_rows,
    interior_ids,
    interior_subscripts,
)
from .geometry import BoundaryNodes, Grid, boundary_decompose
from .solvers import SolveResult, SparseOperator, solve_min_norm
from .weights import WeightSpec, chi0, f_lambda, phase_jet

# Phase oscillation cap: at most this many radians of e^{i tau x2} per
# grid step, beyond which the oscillation aliases and decay studies are
# meaningless.  The cap is enforced, not advisory.
TAU_RESOLUTION_CAP = 2.0

# Largest exponent tau * Re Phi allowed when materializing e^{tau Phi}.
REALIZE_EXPONENT_CAP = 700.0

# Support cut for stencil-form solves: amplitude unknowns are pinned to
# zero wherever 2 tau F exceeds this budget, and the equations at the
# pinned nodes are voided.  The cut acts as a zero-Dirichlet wall a
# short way up the gauge branches (the weight grows toward the
# branches, so the wall's boundary term enters the convexity mechanism
# with the favorable sign).  Fields truncated at matching cuts pair
# exactly — each vanishes at the other's voided rows — so the budget
# trades only conditioning against wall proximity: per grid step the
# conjugated coefficients vary by up to e^{tau dF}, which at the cut
# grows like sqrt(tau * SUPPORT) * h, so a moderate budget keeps the
# normal equations of the minimum-norm solve within refinement range
# at every resolvable tau.
REMAINDER_SUPPORT_LOG = 16.0


@lru_cache(maxsize=1)
def bump_mass() -> float:
    """Mass of the unnormalized standard bump, int_{-1}^{1} e^{-1/(1-s^2)} ds."""
    value, _ = quad(lambda s: np.exp(-1.0 / (1.0 - s * s)), -1.0, 1.0, epsabs=1e-14)
    return value


def bump_profile(distances: np.ndarray, width: float) -> np.ndarray:
    """Unit-mass bump chi_w evaluated at signed distances.

    chi_w(d) = exp(-1/(1-(d/w)^2)) / (w * bump_mass()) for |d| < w and
    exactly zero outside; integrates to 1 for every width.
    """
    if width <= 0.0:
        raise ValueError(f"width must be positive, got {width}")
    g, _, _ = _bump_jet(np.asarray(distances, dtype=float) / width)
    return g / (width * bump_mass())


@lru_cache(maxsize=1)
def bump_mass_sq() -> float:
    """Mass of the squared standard bump, int_{-1}^{1} e^{-2/(1-s^2)} ds."""
    value, _ = quad(lambda s: np.exp(-2.0 / (1.0 - s * s)), -1.0, 1.0, epsabs=1e-14)
    return value


def chi_sq_mass(width: float) -> float:
    """int chi_w(s)^2 ds for the unit-mass bump of the given width.

    Equals bump_mass_sq() / (width * bump_mass()^2); this is the factor
    by which a pairing of two identical width-w profiles overweights the
    plane value, and therefore the normalizer that turns such a pairing
    into a mollified plane average.
    """
    if width <= 0.0:
        raise ValueError(f"width must be positive, got {width}")
    return bump_mass_sq() / (width * bump_mass() ** 2)


def squared_profile(width: float):
    """Unit-mass mollifier chi_w^2 / int chi_w^2 as a profile callable.

    This is the transverse profile a plane moment actually averages with
    when both test solutions carry the same width-w bump, so inversion
    rows built from it match the extracted moments exactly (up to
    quadrature) instead of only to O(w^2).
    """
    norm = chi_sq_mass(width)

    def profile(distances: np.ndarray) -> np.ndarray:
        return bump_profile(distances, width) ** 2 / norm

    return profile


def _bump_jet(sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(g, g', g'') of g(sigma) = exp(-1/(1-sigma^2)) on |sigma| < 1, 0 outside."""
    sigma = np.asarray(sigma, dtype=float)
    g = np.zeros_like(sigma)
    d1 = np.zeros_like(sigma)
    d2 = np.zeros_like(sigma)
    inside = np.abs(sigma) < 1.0
    if np.any(inside):
        s = sigma[inside]
        one_m = 1.0 - s * s
        val = np.exp(-1.0 / one_m)
        p = -2.0 * s / one_m**2
        dp = (-2.0 - 6.0 * s * s) / one_m**3
        g[inside] = val
        d1[inside] = val * p
        d2[inside] = val * (p * p + dp)
    return g, d1, d2


@dataclass(frozen=True)
class Amplitude:
    """Oscillation-free part of a CGO solution: v0 = h(z) chi(x3).

    h(z) = sum_m coefficients[m] z^m is evaluated exactly from the
    stored coefficients; chi is the unit-mass smooth bump of the given
    center and width, so that width -> 0 approximates a delta profile.
    Coordinates are taken in the weight's frame.
    """

    weight: WeightSpec
    coefficients: tuple[complex, ...]
    center: float
    width: float

    def profile(self, heights: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(chi, chi', chi'') of the unit-mass bump at the given heights."""
        scale = 1.0 / (self.width * bump_mass())
        g, d1, d2 = _bump_jet((np.asarray(heights, dtype=float) - self.center) / self.width)
        return g * scale, d1 * scale / self.width, d2 * scale / self.width**2

    def holomorphic(self, z: np.ndarray) -> np.ndarray:
        """h(z), evaluated exactly from the power-series coefficients."""
        return np.polyval(np.asarray(self.coefficients[::-1], dtype=complex), np.asarray(z))

    def holomorphic_derivative(self, z: np.ndarray) -> np.ndarray:
        """h'(z)."""
        c = np.asarray(self.coefficients, dtype=complex)
        if c.size <= 1:
            return np.zeros_like(np.asarray(z), dtype=complex)
        dc = c[1:] * np.arange(1, c.size)
        return np.polyval(dc[::-1], np.asarray(z))

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """v0 at world points (frame coordinates applied internally)."""
        local = self.weight.frame.world_to_frame(np.asarray(points, dtype=float))
        z = local[..., 0] + 1j * local[..., 1]
        chi, _, _ = self.profile(local[..., 2])
        return self.holomorphic(z) * chi

    def field(self, grid: Grid) -> ScalarField:
        """Grid realization of v0 (complex ScalarField)."""
        flat = self.evaluate(grid.points())
        return ScalarField.from_flat(grid, flat)


def make_amplitude(
    spec: WeightSpec,
    coefficients,
    center: float,
    width: float,
) -> Amplitude:
    """Amplitude with validated profile support.

    The closed support [center - width, center + width] of the bump must
    lie inside the open core slab (-t1, t2) intersected with the height
    range (-v_radius, v_radius) of the support ball; there the phase is
    linear, so the eikonal and transport identities hold analytically.
    """
    dom = spec.domain
    width = float(width)
    center = float(center)
    if width <= 0.0:
        raise ValueError(f"width must be positive, got {width}")
    coeffs = tuple(complex(c) for c in np.atleast_1d(np.asarray(coefficients)))
    if len(coeffs) == 0:
        raise ValueError("need at least one series coefficient")
    lo = -min(dom.t1, dom.v_radius)
    hi = min(dom.t2, dom.v_radius)
    if not (center - width > lo and center + width < hi):
        raise ValueError(
            f"profile support [{center - width:g}, {center + width:g}] must lie "
            f"strictly inside ({lo:g}, {hi:g})"
        )
    return Amplitude(weight=spec, coefficients=coeffs, center=center, width=width)


@dataclass(frozen=True)
class TransportCheck:
    """Discrete residual of the amplitude transport identity on V nodes.

    eikonal_max  : max |<dPhi,dPhi>| over V nodes (analytically zero).
    residual_l2  : weighted L2 norm of 2<dPhi, D_h v0> + (Lap Phi) v0.
    residual_max : max-norm of the same residual.
    n_nodes      : number of V nodes entering the norms.
    """

    eikonal_max: float
    residual_l2: float
    residual_max: float
    n_nodes: int


def transport_residual(amplitude: Amplitude, grid: Grid) -> TransportCheck:
    """Check the eikonal and transport identities on the support ball.

    The phase jet is analytic; only the gradient of v0 is discrete, so
    for polynomial h of degree <= 2 the central differences are exact
    and the residual vanishes to roundoff, while higher degrees converge
    at second order.
    """
    spec = amplitude.weight
    pts = grid.points()
    in_v = spec.domain.in_support_ball(pts)
    n_v = int(np.count_nonzero(in_v))
    if n_v == 0:
        raise ValueError("grid has no nodes inside the support ball")
    v0 = amplitude.field(grid)
    grad_v0 = gradient(v0)
    jet = phase_jet(spec, pts)
    flat = [g.flat() for g in grad_v0]
    transport = (
        2.0 * (jet.gradient[:, 0] * flat[0] + jet.gradient[:, 1] * flat[1] + jet.gradient[:, 2] * flat[2])
        + jet.laplacian * v0.flat()
    )
    w_flat = grid._to_linear(grid.volume_weights())
    t_v = transport[in_v]
    return TransportCheck(
        eikonal_max=float(np.max(np.abs(jet.grad_sq[in_v]))),
        residual_l2=float(np.sqrt(np.sum(w_flat[in_v] * np.abs(t_v) ** 2))),
        residual_max=float(np.max(np.abs(t_v))),
        n_nodes=n_v,
    )


def _potential_values(q, what: str = "q") -> tuple[Grid, np.ndarray]:
    """Accept a Potential or ScalarField and return (grid, nodal values)."""
    if isinstance(q, Potential):
        total = q.total()
        return q.grid, total.values
    if isinstance(q, ScalarField):
        return q.grid, q.values
    raise TypeError(f"{what} must be a Potential or ScalarField, got {type(q).__name__}")


def conjugated_operator(q_ctx, weight: WeightSpec, tau: float) -> SparseOperator:
    """Interior rows of r -> e^{-tau Phi}(Lap - q)(e^{tau Phi} r).

    Expanded analytically as Lap r + 2 tau <dPhi, dr> + (tau^2
    <dPhi,dPhi> + tau Lap Phi - q) r; all coefficients come from exact
    phase jets, never from differenced exponentials, so the tau^2
    coefficient vanishes identically on the core slab.  Shape is
    (n_interior, n_nodes); columns cover every grid node.
    """
    grid, q_vals = _potential_values(q_ctx, "q_ctx")
    tau = float(tau)
    h = grid.spacing
    ids = interior_ids(grid)
    pts = grid.points()[ids]
    jet = phase_jet(weight, pts)

    n_int = ids.size
    center = np.full(n_int, -2.0 * sum(1.0 / h[a] ** 2 for a in range(3)), dtype=complex)
    center += tau * tau * jet.grad_sq + tau * jet.laplacian - grid._to_linear(q_vals)[ids]
    neighbor = np.empty((3, 2, n_int), dtype=complex)
    for axis in range(3):
        drift = tau * jet.gradient[:, axis] / h[axis]
        neighbor[axis, 0] = 1.0 / h[axis] ** 2 - drift
        neighbor[axis, 1] = 1.0 / h[axis] ** 2 + drift
    return assemble_interior_rows(grid, center, neighbor)


def dispersion_rates(weight: WeightSpec, tau: float, spacing) -> complex:
    """Grid-exact growth rate for the core linear phase.

    On the flat core of the gauge the phase is linear, alpha x1 + i tau
    x2 in frame coordinates, and the realized exponential is an exact
    discrete harmonic of the 7-point Laplacian iff

        g(alpha) = sum_i [2 cosh(p_i h_i) - 2] / h_i^2 = 0,
        p = alpha u + i tau v,

    where u, v are the world directions of the frame's first two axes
    and h the world grid spacings.  The continuum rate alpha = tau
    satisfies this only to O(tau^4 h^2); left uncorrected, that residue
    multiplies the profile and dominates the remainder forcing once
    tau^2 h > 1, destroying the 1/tau decay the extraction functional
    rests on.  The oscillation rate stays pinned at tau; the growth
    rate — complex in general, because anisotropic spacings mixed by a
    rotated frame shear the discrete symbol — solves g = 0 by complex
    Newton from alpha = tau, with derivative g'(alpha) ~ 2 alpha, so
    the iteration is locally quadratic and cannot drift down the
    small-rate valley of near-roots.  The correction is O(tau^3 h^2),
    so every continuum-limit statement survives unchanged, and g is
    even in p, so the opposite weight sign uses the same rate negated —
    conjugate phase pairs stay exact conjugates.
    """
    tau = float(tau)
    h = np.asarray(spacing, dtype=float)
    rot = weight.frame.rotation
    u = rot[:, 0].astype(complex)
    v = rot[:, 1].astype(complex)

    def residual(alpha: complex) -> complex:
        p = alpha * u + 1j * tau * v
        return complex(np.sum((2.0 * np.cosh(p * h) - 2.0) / h**2))

    alpha = complex(tau)
    scale = max(tau * tau, 1.0)
    for _ in range(60):
        g = residual(alpha)
        if abs(g) <= 1e-13 * scale:
            break
        p = alpha * u + 1j * tau * v
        dg = complex(np.sum(2.0 * u * np.sinh(p * h) / h))
        step = -g / dg
        limit = 0.25 * tau
        if abs(step) > limit:
            step *= limit / abs(step)
        alpha += step
    else:
        raise RuntimeError(
            "dispersion rate solve did not converge: "
            f"tau={tau}, residual={abs(residual(alpha)):.3e}"
        )
    if not (alpha.real > 0.5 * tau):
        raise RuntimeError(
            f"dispersion rate left the physical branch: alpha={alpha}, tau={tau}; "
            "the grid cannot carry this oscillation"
        )
    return complex(alpha)


def stencil_phase(weight: WeightSpec, tau: float, grid: Grid) -> np.ndarray:
    """Phase values used by the discrete (stencil-form) construction.

    Same structure as the continuum phase — sign (x1 chi0 + i x2) + F —
    but with the core growth rate replaced by the grid-exact rate from
    ``dispersion_rates`` (stored divided by tau, so downstream code
    multiplying by tau realizes exponents alpha x1 chi0 + tau F
    + i tau x2).  Everything that pairs, records, or realizes a
    stencil-form solution must evaluate phase through this function:
    the pairing identity only needs the plus/minus phases to sum to 2F,
    which the sign symmetry preserves, while the equality of discrete
    rates on both sides is what makes the recorded fluxes exact.
    """
    tau = float(tau)
    alpha = dispersion_rates(weight, tau, grid.spacing)
    local = weight.frame.world_to_frame(grid.points())
    chi = chi0(weight, local[:, 2])[0]
    gauge = f_lambda(weight, local[:, 2])[0]
    sign = float(weight.sign)
    return sign * (alpha / tau) * local[:, 0] * chi + gauge + 1j * sign * local[:, 1]


def conjugated_stencil(q_ctx, weight: WeightSpec, tau: float) -> SparseOperator:
    """Interior rows of the exactly phase-conjugated Schrodinger stencil.

    Row i, column j holds A_ij exp(tau (Phi_j - Phi_i) - m_i), where A is
    the (-Lap_h + q) stencil and m_i = max_j Re tau (Phi_j - Phi_i) >= 0
    is an analytic per-row exponent shift — row equilibration performed
    in exponent space, before anything overflows, so every entry is
    representable however steep the weight's gauge branches get while
    the solution set is untouched.

    An amplitude a satisfying these rows = 0 makes the realized field
    e^{tau Phi} a satisfy the *same* discrete equations a direct
    Dirichlet solve of (-Lap_h + q) enforces, exactly; that is the
    property boundary-pairing identities need.  The jet-based
    ``conjugated_operator`` is instead second-order consistent with the
    continuum conjugated equation but differs from the conjugated
    discrete stencil at order (tau h)^4 / h^2, which dominates pairing
    errors long before tau reaches the resolution cap.
    """
    grid, q_vals = _potential_values(q_ctx, "q_ctx")
    tau = float(tau)
    h = grid.spacing
    ii, jj, kk = interior_subscripts(grid)
    n_int = ii.size
    phi = stencil_phase(weight, tau, grid)

    sub = (ii, jj, kk)
    phi0 = phi[grid.linear_index(ii, jj, kk)]
    exponents = np.empty((3, 2, n_int), dtype=complex)
    for axis in range(3):
        for s, step in ((0, -1), (1, +1)):
            nb = [ii.copy(), jj.copy(), kk.copy()]
            nb[axis] = nb[axis] + step
            phi_nb = phi[grid.linear_index(nb[0], nb[1], nb[2])]
            exponents[axis, s] = tau * (phi_nb - phi0)
    shift = np.maximum(np.max(exponents.real, axis=(0, 1)), 0.0)

    q_diag = np.asarray(q_vals)[sub]
    lap_diag = 2.0 * sum(1.0 / h[a] ** 2 for a in range(3))
    center = (lap_diag + q_diag) * np.exp(-shift)
    neighbor = np.empty((3, 2, n_int), dtype=complex)
    for axis in range(3):
        for s in (0, 1):
            neighbor[axis, s] = (-1.0 / h[axis] ** 2) * np.exp(
                exponents[axis, s] - shift
            )
    return assemble_interior_rows(grid, center.astype(complex), neighbor)


def _amplitude_rhs(grid: Grid, q_vals: np.ndarray, amplitude: Amplitude) -> np.ndarray:
    """-(Lap - q) v0 at interior nodes, from the analytic amplitude jet.

    On the profile support the phase is linear, so the eikonal and
    transport identities kill the tau^2 and tau terms exactly and the
    conjugated right-hand side reduces to -(h(z) chi'' - q h(z) chi),
    independent of tau.
    """
    ids = interior_ids(grid)
    pts = grid.points()[ids]
    local = amplitude.weight.frame.world_to_frame(pts)
    z = local[:, 0] + 1j * local[:, 1]
    chi, _, d2chi = amplitude.profile(local[:, 2])
    h_z = amplitude.holomorphic(z)
    q_int = grid._to_linear(np.asarray(q_vals))[ids]
    return -(h_z * d2chi - q_int * h_z * chi)


@dataclass(frozen=True)
class RemainderReport:
    """Solve diagnostics attached to a remainder."""

    converged: bool
    iterations: int
    residual: float
    method: str
    rhs_norm: float
    tau: float

    @staticmethod
    def from_solve(res: SolveResult, rhs_norm: float, tau: float) -> "RemainderReport":
        return RemainderReport(
            converged=bool(res.converged),
            iterations=int(res.iterations),
            residual=float(res.residual),
            method=res.method,
            rhs_norm=float(rhs_norm),
            tau=float(tau),
        )


@dataclass(frozen=True)
class RemainderSolve:
    """Remainder field (zero off Gamma on the boundary) plus its report."""

    remainder: ScalarField
    report: RemainderReport


def _check_tau(tau: float, grid: Grid) -> float:
    tau = float(tau)
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    cap = TAU_RESOLUTION_CAP / max(grid.spacing)
    if tau > cap:
        raise ValueError(
            f"tau={tau:g} exceeds the grid resolvability cap {cap:g} "
            f"({TAU_RESOLUTION_CAP:g}/max-spacing); refine the grid or lower tau"
        )
    return tau


def free_gamma_mask(
    boundary: BoundaryNodes, weight: WeightSpec, gamma_band: float | None
) -> np.ndarray:
    """Boundary-node mask of the remainder's free columns.

    Without a band this is the accessible patch itself.  With
    ``gamma_band`` set it is further cut to the height band
    |x3_frame| <= gamma_band; choosing the band inside the core slab
    keeps every free boundary node in the region where the gauge
    profile vanishes, so paired products of conjugate-phase solutions
    carry no exponential factor anywhere their traces are nonzero.
    """
    mask = boundary.in_gamma.copy()
    if gamma_band is not None:
        band = float(gamma_band)
        if band <= 0.0:
            raise ValueError(f"gamma_band must be positive, got {gamma_band}")
        local = weight.frame.world_to_frame(boundary.coords)
        mask &= np.abs(local[:, 2]) <= band + 1e-12
    return mask


@dataclass(frozen=True)
class RemainderSystem:
    """Conjugated-equation system with a fixed operator, reusable across profiles.

    Equations are the interior rows of the conjugated operator for one
    (potential, weight, tau); unknowns are the interior nodes plus the
    free boundary nodes from ``free_gamma_mask``.  The right-hand side
    depends only on the amplitude, so one operator (or one factorization
    of it) serves a whole family of profile centers.
    """

    grid: Grid
    weight: WeightSpec
    tau: float
    boundary: BoundaryNodes
    gamma_band: float | None
    operator: SparseOperator
    unknown: np.ndarray
    q_values: np.ndarray
    form: str = "jet"

    def rhs(self, amplitude: Amplitude) -> np.ndarray:
        """Conjugated right-hand side at interior nodes for one amplitude."""
        if self.form != "jet":
            raise ValueError(
                "the analytic right-hand side matches only the jet-form "
                "operator; use rhs_discrete with the stencil form"
            )
        return _amplitude_rhs(self.grid, self.q_values, amplitude)

    def rhs_discrete(self, amplitude: Amplitude) -> np.ndarray:
        """Right-hand side consistent with the discrete operator itself.

        Minus the interior-row operator applied to the nodal profile
        field, so the solved total amplitude satisfies the same discrete
        interior equations a square boundary-data solve of this operator
        would — which is what pairing against an independently solved
        measurement requires.  The analytic ``rhs`` differs by the
        profile's discretization error and is the right choice when the
        remainder is meant to approximate the continuum remainder (e.g.
        for decay-rate studies).  Exactness here relies on the profile
        vanishing at every pinned boundary node, which is validated.
        """
        v0 = amplitude.field(self.grid).flat()
        pinned = np.ones(self.grid.n_nodes, dtype=bool)
        pinned[self.unknown] = False
        if np.any(pinned) and np.any(v0[pinned] != 0):
            raise ValueError(
                "profile field is nonzero at pinned boundary nodes; the "
                "discrete right-hand side requires the profile trace to live "
                "on the free part of the accessible patch"
            )
        return -self.operator.matvec(v0[self.unknown])

    def rhs_norm(self, rhs: np.ndarray) -> float:
        """Volume-weighted L2 norm of an interior right-hand side."""
        w_flat = self.grid._to_linear(self.grid.volume_weights())
        return float(np.sqrt(np.sum(w_flat[interior_ids(self.grid)] * np.abs(rhs) ** 2)))

    def lift(self, x: np.ndarray) -> ScalarField:
        """Scatter an unknown-vector back to a full grid field (zero elsewhere)."""
        flat = np.zeros(self.grid.n_nodes, dtype=complex)
        flat[self.unknown] = x
        return ScalarField.from_flat(self.grid, flat)

    def solution(
        self, amplitude: Amplitude, x: np.ndarray, report: RemainderReport
    ) -> CgoSolution:
        """Package one solved remainder vector as a CgoSolution."""
        remainder = self.lift(x)
        v0 = amplitude.field(self.grid)
        total_flat = v0.flat() + remainder.flat()
        off_gamma = self.boundary.index[~self.boundary.in_gamma]
        worst_trace = float(np.max(np.abs(total_flat[off_gamma]))) if off_gamma.size else 0.0
        scale = max(1.0, float(np.max(np.abs(total_flat))))
        return CgoSolution(
            tau=self.tau,
            weight=self.weight,
            amplitude=amplitude,
            remainder=remainder,
            amplitude_field=v0,
            report=report,
            trace_in_gamma=bool(worst_trace <= 1e-10 * scale),
        )


def remainder_system(
    q1,
    weight: WeightSpec,
    tau: float,
    *,
    boundary: BoundaryNodes | None = None,
    gamma_band: float | None = None,
    form: str = "jet",
    support_log: float = REMAINDER_SUPPORT_LOG,
) -> RemainderSystem:
    """Assemble the rectangular conjugated system once for reuse.

    Columns at boundary nodes outside the free mask are removed, which
    pins the remainder to zero there; the minimum-norm closure over the
    remaining columns is what ``solve_remainder`` computes.

    form="jet" expands the conjugation with analytic phase jets (the
    natural choice for decay-rate studies against the continuum
    identity); form="stencil" conjugates the discrete stencil exactly
    (the choice when the solved amplitude must satisfy the same discrete
    equations an independent Dirichlet solve enforces, as in
    boundary-pairing pipelines).  The stencil form additionally pins
    interior amplitude unknowns wherever 2 tau F exceeds
    ``support_log`` (see ``REMAINDER_SUPPORT_LOG``): the solved field,
    extended by those exact zeros, still satisfies every interior row,
    so pairings against it stay exact while nothing the algebra touches
    leaves float range.
    """
    grid, q_vals = _potential_values(q1, "q1")
    tau = _check_tau(tau, grid)
    if boundary is None:
        boundary = boundary_decompose(grid)
    if form == "jet":
        op = conjugated_operator(ScalarField(grid, q_vals), weight, tau)
    elif form == "stencil":
        op = conjugated_stencil(ScalarField(grid, q_vals), weight, tau)
    else:
        raise ValueError(f"form must be 'jet' or 'stencil', got {form!r}")
    free = free_gamma_mask(boundary, weight, gamma_band)
    int_ids = interior_ids(grid)
    keep = None
    if form == "stencil":
        heights = weight.frame.world_to_frame(grid.points())[:, 2]
        gauge = f_lambda(weight, heights)[0]
        keep = 2.0 * tau * gauge[int_ids] <= float(support_log)
        int_ids = int_ids[keep]
    unknown = np.concatenate([int_ids, boundary.index[free]])
    sub = op.to_scipy().tocsc()[:, unknown].tocsr()
    if form == "stencil":
        # Equations at pinned centers are not part of the truncated
        # problem (keeping their surviving near-wall entries would
        # impose a contradictory second wall condition), so void them;
        # they hold 0 = 0, and fields truncated at the matching cut
        # vanish at every voided row, which keeps boundary pairings
        # against them exact.  The closure stays minimum-norm in plain
        # amplitude L2 — the norm the conjugated-operator estimate
        # controls, so the solved remainder inherits the decay bound of
        # any admissible solution.
        sub = (scipy.sparse.diags(keep.astype(float)) @ sub).tocsr()
    sub_op = SparseOperator(sub.indptr, sub.indices, sub.data, sub.shape)
    return RemainderSystem(
        grid=grid,
        weight=weight,
        tau=tau,
        boundary=boundary,
        gamma_band=gamma_band,
        operator=sub_op,
        unknown=unknown,
        q_values=np.asarray(q_vals),
        form=form,
    )


def solve_remainder(
    q1,
    weight: WeightSpec,
    tau: float,
    amplitude: Amplitude,
    *,
    tol: float = 1e-9,
    maxiter: int = 20000,
    preconditioner="jacobi",
    boundary: BoundaryNodes | None = None,
    gamma_band: float | None = None,
) -> RemainderSolve:
    """Minimum-norm remainder of the conjugated equation.

    Equations live at interior nodes; unknowns at interior nodes and the
    free part of Gamma; the remainder is pinned to zero on the rest of
    the boundary by removing those columns.  The minimum-norm solve is
    the discrete analogue of selecting the remainder with no kernel
    component.
    """
    system = remainder_system(q1, weight, tau, boundary=boundary, gamma_band=gamma_band)
    rhs = system.rhs(amplitude)
    res = solve_min_norm(system.operator, rhs, tol=tol, maxiter=maxiter, preconditioner=preconditioner)
    rhs_norm = system.rhs_norm(rhs)
    report = RemainderReport.from_solve(res, rhs_norm, system.tau)
    if not res.converged:
        raise RuntimeError(
            f"remainder solve did not converge: method={report.method}, "
            f"iterations={report.iterations}, relative residual={report.residual:.3e} "
            f"(tol {tol:g}), tau={system.tau:g}, rhs norm={rhs_norm:.3e}"
        )
    return RemainderSolve(remainder=system.lift(res.x), report=report)


@dataclass(frozen=True)
class CgoSolution:
    """CGO solution stored in amplitude variables.

    The full field u = e^{tau Phi}(v0 + r) overflows float range for
    large tau, so the exponential is applied only on demand by
    ``realize``; everything else works with the amplitude v0 + r.
    ``trace_in_gamma`` records that the amplitude trace vanishes on the
    boundary off Gamma (the exponential preserves exact zeros).
    """

    tau: float
    weight: WeightSpec
    amplitude: Amplitude
    remainder: ScalarField
    amplitude_field: ScalarField
    report: RemainderReport
    trace_in_gamma: bool

    @property
    def grid(self) -> Grid:
        return self.remainder.grid

    def total_amplitude(self) -> ScalarField:
        """v0 + r."""
        return ScalarField(self.grid, self.amplitude_field.values + self.remainder.values)

    @property
    def pde_residual(self) -> float:
        """Relative residual of the conjugated equation (solver metric)."""
        return self.report.residual

    def realize(self, exponent_cap: float = REALIZE_EXPONENT_CAP) -> ScalarField:
        """Materialize u = e^{tau Phi}(v0 + r), guarding against overflow.

        Exact zeros of the amplitude stay exact zeros of u, so the
        boundary trace off Gamma survives the exponential; if the
        exponent tau*Re(Phi) exceeds the cap anywhere the amplitude is
        nonzero, the field is not representable and an error is raised.
        """
        a = self.total_amplitude().flat()
        mask = a != 0.0
        u = np.zeros(self.grid.n_nodes, dtype=complex)
        if np.any(mask):
            jet = phase_jet(self.weight, self.grid.points()[mask])
            exponent = self.tau * jet.value
            worst = float(np.max(exponent.real))
            if worst > exponent_cap:
                raise ValueError(
                    f"realizing u would overflow: max tau*Re(Phi) = {worst:.3g} "
                    f"exceeds cap {exponent_cap:g}; work in amplitude variables instead"
                )
            u[mask] = np.exp(exponent) * a[mask]
        return ScalarField.from_flat(self.grid, u)


def assemble_cgo(
    q,
    weight: WeightSpec,
    tau: float,
    amplitude: Amplitude,
    *,
    tol: float = 1e-9,
    maxiter: int = 20000,
    preconditioner="jacobi",
    boundary: BoundaryNodes | None = None,
    gamma_band: float | None = None,
) -> CgoSolution:
    """Solve for the remainder and package the CGO solution."""
    system = remainder_system(q, weight, tau, boundary=boundary, gamma_band=gamma_band)
    rhs = system.rhs(amplitude)
    res = solve_min_norm(system.operator, rhs, tol=tol, maxiter=maxiter, preconditioner=preconditioner)
    rhs_norm = system.rhs_norm(rhs)
    report = RemainderReport.from_solve(res, rhs_norm, system.tau)
    if not res.converged:
        raise RuntimeError(
            f"remainder solve did not converge: method={report.method}, "
            f"iterations={report.iterations}, relative residual={report.residual:.3e} "
            f"(tol {tol:g}), tau={system.tau:g}, rhs norm={rhs_norm:.3e}"
        )
    return system.solution(amplitude, res.x, report)


@dataclass(frozen=True)
class TauDecayRow:
    """One rung of a tau-decay study."""

    tau: float
    remainder_norm: float
    rhs_norm: float
    residual: float
    iterations: int
    method: str


@dataclass(frozen=True)
class TauDecayStudy:
    """Remainder decay across a tau ladder.

    slope is the least-squares slope of log ||r|| against log tau; the
    window ratio max/min of tau * ||r|| measures how far the ladder is
    from exact 1/tau decay (bounded ratio = bounded tau*||r||).
    """

    rows: tuple[TauDecayRow, ...]

    @property
    def taus(self) -> np.ndarray:
        return np.array([row.tau for row in self.rows])

    @property
    def remainder_norms(self) -> np.ndarray:
        return np.array([row.remainder_norm for row in self.rows])

    @property
    def slope(self) -> float:
        if len(self.rows) < 2:
            raise ValueError("need at least two rungs to fit a slope")
        return float(np.polyfit(np.log(self.taus), np.log(self.remainder_norms), 1)[0])

    @property
    def tau_weighted_ratio(self) -> float:
        scaled = self.taus * self.remainder_norms
        return float(np.max(scaled) / np.min(scaled))


def l2_norm(field: ScalarField) -> float:
    """Volume-weighted L2 norm of a (possibly complex) field."""
    w = field.grid.volume_weights()
    return float(np.sqrt(np.sum(w * np.abs(field.values) ** 2)))


def tau_decay_study(
    q,
    weight: WeightSpec,
    amplitude: Amplitude,
    taus,
    *,
    tol: float = 1e-9,
    maxiter: int = 20000,
    preconditioner="jacobi",
) -> TauDecayStudy:
    """Solve the remainder on each tau of a ladder and record the decay."""
    grid, q_vals = _potential_values(q, "q")
    boundary = boundary_decompose(grid)
    q_field = ScalarField(grid, q_vals)
    rows = []
    for tau in taus:
        solve = solve_remainder(
            q_field,
            weight,
            tau,
            amplitude,
            tol=tol,
            maxiter=maxiter,
            preconditioner=preconditioner,
            boundary=boundary,
        )
        rows.append(
            TauDecayRow(
                tau=float(tau),
                remainder_norm=l2_norm(solve.remainder),
                rhs_norm=solve.report.rhs_norm,
                residual=solve.report.residual,
                iterations=solve.report.iterations,
                method=solve.report.method,
            )
        )
    return TauDecayStudy(rows=tuple(rows))
