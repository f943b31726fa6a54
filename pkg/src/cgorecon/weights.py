"""Carleman weight family: cutoff/gauge profiles, phase jets, convexity check.

The weight is built from two height profiles.  With s the normalized
band coordinate (s = (y - t2)/d2 above the core, s = (y + t1)/d1 below,
so |s| runs 0 -> 1 across a band):

    cutoff  chi0(y)     = 1 on the core, (1 - s^(8k))^k on the bands,
                          0 outside;
    gauge   F_lambda(y) = 0 on the core, exp(lam s^2) s^(2k) on both
                          outer branches (the branch formula extends
                          beyond the band).

The real weights and complex phases, for a sign in {+1, -1} and frame
coordinates (x1, x2, y):

    w_sign   = sign * x1 * chi0(y) + F_lambda(y)   (real Carleman weight)
    Phi_sign = w_sign + i * sign * x2              (complex phase)

so Phi_{+1} + Phi_{-1} = 2 F_lambda is real, and on the core slab the
two phases are exact negatives with <dPhi, dPhi> = 0 identically.

chi0 has a zero of order 8k at the inner junctions and of order k at the
outer junctions; F_lambda has zeros of order 2k at the junctions.  The
global smoothness class is C^(k-1).

The sign condition checked by ``hormander_min`` is the second-order
bracket positivity on the characteristic set of the conjugated symbol:
for g = grad w and every X with |X| = |g|, X . g = 0, the quantity
D2w(X, X) + D2w(g, g) must be nonnegative.  Minimizing over X in closed
form reduces it to a scalar function of (x1, y); ``lambda_search`` grows
lam until the minimum over a dense sample clears a tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Domain, Frame

_ORTHO_TOL = 1e-10
_DEGENERATE_TOL = 1e-14


@dataclass(frozen=True)
class WeightSpec:
    """Parameters of one member of the weight family.

    k     : flatness order of the cutoff (smoothness class C^(k-1)).
    lam   : gauge strength (must be certified by ``lambda_search`` for
            the convexity bracket to be nonnegative).
    frame : orthonormal frame carrying the slab structure.
    sign  : +1 or -1, selecting the phase or its core-slab negative.
    """

    domain: Domain
    k: int = 1
    lam: float = 1.0
    frame: Frame = field(default_factory=Frame)
    sign: int = +1

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")
        if self.lam <= 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.sign not in (+1, -1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")

    def conjugate(self) -> "WeightSpec":
        """The sign-flipped spec (same profiles, opposite phase)."""
        return replace(self, sign=-self.sign)


def chi0(spec: WeightSpec, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(chi0, chi0', chi0'') of the cutoff profile at heights y.

    Junction heights evaluate the band branch (one-sided limits from
    inside the bands), matching the region classification.
    """
    dom = spec.domain
    k = spec.k
    p = 8 * k
    y = np.asarray(y, dtype=float)
    chi = np.zeros_like(y)
    d1 = np.zeros_like(y)
    d2 = np.zeros_like(y)

    core = (y > -dom.t1) & (y < dom.t2)
    chi[core] = 1.0

    for lo, hi, t, delta in (
        (dom.t2, dom.t2 + dom.d2, dom.t2, dom.d2),
        (-dom.t1 - dom.d1, -dom.t1, -dom.t1, dom.d1),
    ):
        band = (y >= lo) & (y <= hi)
        if not np.any(band):
            continue
        s = (y[band] - t) / delta
        u = s**p
        du = p * s ** (p - 1) / delta
        d2u = p * (p - 1) * s ** (p - 2) / (delta * delta)
        one_m = 1.0 - u
        chi[band] = one_m**k
        d1[band] = -k * one_m ** (k - 1) * du
        dd = -k * one_m ** (k - 1) * d2u
        if k >= 2:
            dd = dd + k * (k - 1) * one_m ** (k - 2) * du * du
        d2[band] = dd
    return chi, d1, d2


def f_lambda(spec: WeightSpec, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(F, F', F'') of the gauge profile at heights y.

    The two branch formulas extend past the bands; the profile is zero
    only on the closed core [-t1, t2].
    """
    dom = spec.domain
    k = spec.k
    lam = spec.lam
    y = np.asarray(y, dtype=float)
    F = np.zeros_like(y)
    d1 = np.zeros_like(y)
    d2 = np.zeros_like(y)
    for branch, t, delta in ((y >= dom.t2, dom.t2, dom.d2), (y <= -dom.t1, -dom.t1, dom.d1)):
        if not np.any(branch):
            continue
        s = (y[branch] - t) / delta
        s2 = s * s
        e = np.exp(lam * s2)
        F[branch] = e * s ** (2 * k)
        d1[branch] = e * s ** (2 * k - 1) * (2 * k + 2 * lam * s2) / delta
        d2[branch] = (
            e
            * s ** (2 * k - 2)
            * (2 * k * (2 * k - 1) + (8 * lam * k + 2 * lam) * s2 + 4 * lam * lam * s2 * s2)
            / (delta * delta)
        )
    return F, d1, d2


@dataclass(frozen=True)
class PhaseJet:
    """Pointwise jet of the complex phase at a batch of points.

    gradient and hessian are in world coordinates (hessian is complex
    symmetric and vanishes identically on the core slab).  grad_sq is
    the bilinear square <dPhi, dPhi> (no conjugation), computed in
    closed form so that it is exactly zero on the core slab.  chi and
    gauge expose the underlying height profiles (gauge drives the
    boundary weight exp(2 tau F)).
    """

    value: np.ndarray
    gradient: np.ndarray
    hessian: np.ndarray
    laplacian: np.ndarray
    grad_sq: np.ndarray
    chi: np.ndarray
    gauge: np.ndarray
    sign: int

    @property
    def weight_value(self) -> np.ndarray:
        """Real Carleman weight w_sign = Re Phi."""
        return self.value.real

    @property
    def weight_gradient(self) -> np.ndarray:
        return self.gradient.real

    @property
    def weight_hessian(self) -> np.ndarray:
        return self.hessian.real

    @property
    def weight_laplacian(self) -> np.ndarray:
        return self.laplacian.real


def phase_jet(spec: WeightSpec, points: np.ndarray) -> PhaseJet:
    """Evaluate Phi = sign*(x1 chi0 + i x2) + F_lambda and its jet.

    points has shape (..., 3) in world coordinates; the slab structure
    lives in spec.frame.
    """
    pts = np.asarray(points, dtype=float)
    frame = spec.frame
    sign = spec.sign
    local = pts if frame.is_identity else frame.world_to_frame(pts)
    x1 = local[..., 0]
    x2 = local[..., 1]
    y = local[..., 2]

    chi, dchi, d2chi = chi0(spec, y)
    F, dF, d2F = f_lambda(spec, y)

    value = sign * x1 * chi + F + 1j * sign * x2
    g1 = sign * chi
    g3 = sign * x1 * dchi + dF
    grad_local = np.stack(
        [g1 + 0j, np.full_like(x1, 1j * sign, dtype=complex), g3 + 0j], axis=-1
    )
    h13 = sign * dchi
    h33 = sign * x1 * d2chi + d2F
    hess_local = np.zeros(y.shape + (3, 3), dtype=complex)
    hess_local[..., 0, 2] = h13
    hess_local[..., 2, 0] = h13
    hess_local[..., 2, 2] = h33
    if frame.is_identity:
        grad = grad_local
        hess = hess_local
    else:
        R = frame.rotation
        grad = grad_local @ R.T
        hess = np.einsum("ai,...ij,bj->...ab", R, hess_local, R)
    laplacian = (sign * x1 * d2chi + d2F).astype(complex)
    # <dPhi, dPhi> = chi^2 - 1 + (sign x1 chi' + F')^2, exactly 0 on the core
    grad_sq = (chi * chi - 1.0 + g3 * g3).astype(complex)
    return PhaseJet(
        value=value,
        gradient=grad,
        hessian=hess,
        laplacian=laplacian,
        grad_sq=grad_sq,
        chi=chi,
        gauge=F,
        sign=sign,
    )


def hormander_quantity(spec: WeightSpec, points: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Second-order bracket quantity D2w(X, X) + D2w(g, g) at given X.

    points (..., 3) are world coordinates, directions (..., 3) the
    candidate X, which must satisfy the characteristic-set constraints
    |X| = |grad w| and X . grad w = 0 to 1e-10 (relative to |grad w|^2);
    violations raise ValueError.
    """
    pts = np.asarray(points, dtype=float)
    X = np.asarray(directions, dtype=float)
    if X.shape != pts.shape:
        raise ValueError(f"directions shape {X.shape} must match points shape {pts.shape}")
    jet = phase_jet(spec, pts)
    g = jet.weight_gradient
    H = jet.weight_hessian
    gg = np.sum(g * g, axis=-1)
    scale = np.maximum(gg, 1.0)
    norm_defect = np.abs(np.sum(X * X, axis=-1) - gg)
    ortho_defect = np.abs(np.sum(X * g, axis=-1))
    if np.any(norm_defect > _ORTHO_TOL * scale):
        worst = float(np.max(norm_defect / scale))
        raise ValueError(f"|X| must equal |grad w| to 1e-10, worst relative defect {worst:.3e}")
    if np.any(ortho_defect > _ORTHO_TOL * scale):
        worst = float(np.max(ortho_defect / scale))
        raise ValueError(f"X must be orthogonal to grad w to 1e-10, worst relative defect {worst:.3e}")
    quad = np.einsum("...i,...ij,...j->...", X, H, X)
    quad_g = np.einsum("...i,...ij,...j->...", g, H, g)
    return quad + quad_g


def _bracket_closed_form(
    spec: WeightSpec, x1: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form scan ingredients at frame coordinates (x1, y).

    For the weight w = sign*x1*chi0(y) + F(y) the gradient is
    g = (sign*chi0, 0, sign*x1*chi0' + F') and the Hessian has only the
    entries H13 = sign*chi0', H33 = sign*x1*chi0'' + F''.  Minimizing
    D2w(X, X) + D2w(g, g) over the characteristic circle gives

        min(-2 g1 g3 H13 + g1^2 H33, 0) + (2 g1 g3 H13 + g3^2 H33)

    with the first-term minimizer X = (-g3, 0, g1) and the second-branch
    minimizer X = (0, |g|, 0).  Returns (quantity, g1, g3, see) where
    see < 0 picks the first branch.  The quantity is x2-independent.
    """
    x1 = np.asarray(x1, dtype=float)
    y = np.asarray(y, dtype=float)
    chi, dchi, d2chi = chi0(spec, y)
    F, dF, d2F = f_lambda(spec, y)
    sign = spec.sign
    g1 = sign * chi
    g3 = sign * x1 * dchi + dF
    h13 = sign * dchi
    h33 = sign * x1 * d2chi + d2F
    see = -2.0 * g1 * g3 * h13 + g1 * g1 * h33
    dgg = 2.0 * g1 * g3 * h13 + g3 * g3 * h33
    return np.minimum(see, 0.0) + dgg, g1, g3, see


def bracket_quantity_2d(spec: WeightSpec, x1: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Characteristic-set minimum of the bracket at frame coordinates."""
    return _bracket_closed_form(spec, x1, y)[0]


@dataclass(frozen=True)
class BracketReport:
    """Result of a convexity-bracket scan.

    argmin_point / argmin_direction are in world coordinates; the
    direction achieves the reported minimum and satisfies the
    characteristic-set constraints exactly.  Points where |grad w|
    falls below 1e-14 are skipped and counted in n_skipped.
    """

    min_value: float
    argmin_point: tuple[float, float, float]
    argmin_direction: tuple[float, float, float]
    n_samples: int
    n_skipped: int
    region_min: dict = field(default_factory=dict)


def _argmin_direction(g1: float, g3: float, see: float) -> np.ndarray:
    """Characteristic-circle minimizer in frame coordinates."""
    g = np.array([g1, 0.0, g3])
    norm = np.linalg.norm(g)
    if see < 0.0:
        w = np.array([-g3, 0.0, g1])
        return w  # |w| = |g| and w . g = 0 exactly
    return np.array([0.0, norm, 0.0])


def _report_from_scan(
    spec: WeightSpec,
    q: np.ndarray,
    g1: np.ndarray,
    g3: np.ndarray,
    see: np.ndarray,
    frame_points: np.ndarray,
    n_skipped: int,
) -> BracketReport:
    flat = int(np.argmin(q))
    pt_local = frame_points[flat]
    direction_local = _argmin_direction(float(g1.reshape(-1)[flat]), float(g3.reshape(-1)[flat]), float(see.reshape(-1)[flat]))
    R = spec.frame.rotation
    pt_world = pt_local if spec.frame.is_identity else R @ pt_local
    dir_world = direction_local if spec.frame.is_identity else R @ direction_local
    regions = spec.domain.classify_height(frame_points[:, 2])
    qf = q.reshape(-1)
    region_min = {int(r): float(np.min(qf[regions == r])) for r in np.unique(regions)}
    return BracketReport(
        min_value=float(qf[flat]),
        argmin_point=tuple(float(v) for v in pt_world),
        argmin_direction=tuple(float(v) for v in dir_world),
        n_samples=int(qf.size) + n_skipped,
        n_skipped=n_skipped,
        region_min=region_min,
    )


def hormander_min(spec: WeightSpec, points: np.ndarray) -> BracketReport:
    """Minimum of the characteristic-set bracket over a world point sample.

    Points where |grad w| < 1e-14 (where the characteristic circle
    degenerates) are skipped; their count is reported.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
    local = pts if spec.frame.is_identity else spec.frame.world_to_frame(pts)
    q, g1, g3, see = _bracket_closed_form(spec, local[:, 0], local[:, 2])
    alive = g1 * g1 + g3 * g3 >= _DEGENERATE_TOL**2
    n_skipped = int(np.sum(~alive))
    if not np.any(alive):
        raise ValueError("all sample points have degenerate weight gradient")
    return _report_from_scan(
        spec, q[alive], g1[alive], g3[alive], see[alive], local[alive], n_skipped
    )


def _sample_heights(domain: Domain, n_coarse: int, n_band: int) -> np.ndarray:
    """Height sample: uniform over the box plus dense coverage of the bands."""
    ys = [np.linspace(-domain.half_widths[2], domain.half_widths[2], n_coarse)]
    for lo, hi in (
        (domain.t2, domain.t2 + domain.d2),
        (-domain.t1 - domain.d1, -domain.t1),
    ):
        ys.append(np.linspace(lo, hi, n_band))
    ys.append(np.array([domain.t2, domain.t2 + domain.d2, -domain.t1, -domain.t1 - domain.d1]))
    return np.unique(np.concatenate(ys))


def hormander_scan(
    spec: WeightSpec,
    n_x1: int = 65,
    n_height: int = 257,
    n_band: int = 129,
) -> BracketReport:
    """Dense 2-D (x1, height) scan of the bracket minimum.

    The bracket quantity is independent of the second frame coordinate,
    so this covers the full box; the bands get extra sample density and
    the junction heights are included exactly.
    """
    dom = spec.domain
    x1 = np.linspace(-dom.half_widths[0], dom.half_widths[0], n_x1)
    y = _sample_heights(dom, n_height, n_band)
    X1 = np.broadcast_to(x1[:, None], (x1.size, y.size))
    Y = np.broadcast_to(y[None, :], (x1.size, y.size))
    q, g1, g3, see = _bracket_closed_form(spec, X1, Y)
    frame_points = np.column_stack(
        [X1.reshape(-1), np.zeros(X1.size), Y.reshape(-1)]
    )
    degenerate = g1 * g1 + g3 * g3 < _DEGENERATE_TOL**2
    n_skipped = int(np.sum(degenerate))
    if n_skipped:
        keep = ~degenerate.reshape(-1)
        return _report_from_scan(
            spec,
            q.reshape(-1)[keep],
            g1.reshape(-1)[keep],
            g3.reshape(-1)[keep],
            see.reshape(-1)[keep],
            frame_points[keep],
            n_skipped,
        )
    return _report_from_scan(spec, q, g1, g3, see, frame_points, 0)


@dataclass(frozen=True)
class LambdaSearchResult:
    """Certified gauge strength with the search trace and failure witness.

    lam is the certified value (safety factor above the refined
    threshold); threshold is the smallest probed lam that passed.  The
    failure witness records the largest failing probe (or the lam/2
    probe when that fails), as evidence that the certificate is sharp;
    it is None when even the initial probe passed.
    """

    lam: float
    threshold: float
    min_at_lam: float
    min_at_threshold: float
    failure_lam: float | None
    failure_min: float | None
    failure_point: tuple[float, float, float] | None
    trace: tuple = ()


def lambda_search(
    domain: Domain,
    k: int = 1,
    tol: float = -1e-12,
    lam0: float = 1.0,
    lam_max: float = float(2**60),
    safety: float = 2.0,
    rel_refine: float = 0.05,
    sample: np.ndarray | None = None,
) -> LambdaSearchResult:
    """Find a certified lam: bracket minimum >= tol on a dense sample.

    Doubling from lam0 locates a passing value, geometric bisection
    refines the pass/fail threshold to rel_refine, and the returned lam
    is the refined threshold times the safety factor.  The certificate
    re-probes at lam and at lam/2 and carries a failure witness.  By
    default the probe is the dense 2-D scan; a world point sample of
    shape (N, 3) may be supplied instead.  Raises if no lam <= lam_max
    passes.
    """
    trace = []

    def probe(lam: float) -> BracketReport:
        spec = WeightSpec(domain, k, lam)
        rep = hormander_scan(spec) if sample is None else hormander_min(spec, sample)
        trace.append((lam, rep.min_value))
        return rep

    lam = lam0
    rep = probe(lam)
    failures: list[tuple[float, BracketReport]] = []
    while rep.min_value < tol:
        failures.append((lam, rep))
        lam *= 2.0
        if lam > lam_max:
            raise RuntimeError(
                f"no gauge strength up to {lam_max:g} satisfies the convexity "
                f"bracket for k={k} on this domain (last min {rep.min_value:.3e})"
            )
        rep = probe(lam)

    hi, hi_rep = lam, rep
    lo = lam / 2.0 if lam > lam0 else None
    if lo is not None:
        while hi / lo > 1.0 + rel_refine:
            mid = float(np.sqrt(lo * hi))
            rep = probe(mid)
            if rep.min_value >= tol:
                hi, hi_rep = mid, rep
            else:
                failures.append((mid, rep))
                lo = mid

    certified = safety * hi
    cert_rep = probe(certified)
    if cert_rep.min_value < tol:
        # Non-monotone corner case: fall back to the largest passing probe.
        certified, cert_rep = hi, hi_rep

    half_rep = probe(certified / 2.0)
    if half_rep.min_value < tol:
        witness: tuple[float, BracketReport] | None = (certified / 2.0, half_rep)
    elif failures:
        witness = max(failures, key=lambda fr: fr[0])
    else:
        witness = None
    return LambdaSearchResult(
        lam=certified,
        threshold=hi,
        min_at_lam=cert_rep.min_value,
        min_at_threshold=hi_rep.min_value,
        failure_lam=None if witness is None else witness[0],
        failure_min=None if witness is None else witness[1].min_value,
        failure_point=None if witness is None else witness[1].argmin_point,
        trace=tuple(trace),
    )
