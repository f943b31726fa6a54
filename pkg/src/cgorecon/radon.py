"""Plane-integral transform of gridded fields and regularized inversion.

The forward operator integrates a field over planes (optionally
mollified across a slab of width w by the unit-mass bump); the inverse
recovers a field supported in the ball V from plane samples over a
direction cone by conjugate gradients on Tikhonov normal equations.

Every plane sample is realized as an explicit linear functional (a
sparse row of quadrature weights over grid nodes), and both the forward
values and the inversion matrix use the same rows, so the discrete
adjoint is exact by construction.  Three row flavors:

  - width 0, axis-aligned plane through a node coordinate: the exact
    2-D tensor-trapezoid slice (integrals of constants are exact);
  - width 0, general plane: midpoint quadrature on an in-plane
    rectangle, scattered onto grid nodes through trilinear weights
    (second-order accurate);
  - width > 0: volume trapezoid of f times the unit-mass bump of the
    signed plane distance (the w-mollified transform).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse

from .cgo import bump_profile
from .fields import ScalarField
from .geometry import Domain, Frame, Grid, Plane

_UNIT_TOL = 1e-14
_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class RadonSample:
    """One plane integral: the plane, the measured value, and the
    mollifier width it was taken with (0 = sharp plane)."""

    plane: Plane
    value: float
    width: float


@dataclass(frozen=True)
class DirectionSet:
    """Cone of plane normals around e3 with per-direction offset grids.

    Normals are Fibonacci-spiral sampled over the spherical cap of the
    given half-angle (unit length to 1e-14); offsets are plane heights
    along each normal and must lie inside the open slab interval.
    """

    normals: np.ndarray
    offsets: tuple[np.ndarray, ...]
    half_angle: float

    def __post_init__(self) -> None:
        normals = np.ascontiguousarray(self.normals, dtype=float)
        if normals.ndim != 2 or normals.shape[1] != 3:
            raise ValueError(f"normals must be (M, 3), got {normals.shape}")
        lengths = np.linalg.norm(normals, axis=1)
        if np.any(np.abs(lengths - 1.0) > _UNIT_TOL):
            raise ValueError("normals must be unit length to 1e-14")
        if len(self.offsets) != normals.shape[0]:
            raise ValueError(
                f"need one offset grid per direction: {len(self.offsets)} != {normals.shape[0]}"
            )
        normals.flags.writeable = False
        object.__setattr__(self, "normals", normals)
        object.__setattr__(
            self, "offsets", tuple(np.asarray(o, dtype=float) for o in self.offsets)
        )

    def __len__(self) -> int:
        return self.normals.shape[0]

    def planes(self) -> list[Plane]:
        """All (direction, offset) planes, direction-major order."""
        out = []
        for normal, offs in zip(self.normals, self.offsets):
            frame = Frame.from_normal(normal)
            for s in offs:
                out.append(Plane(frame, float(s)))
        return out


def make_direction_set(
    domain: Domain,
    half_angle_deg: float,
    n_directions: int,
    n_offsets: int,
    offset_span: float | None = None,
) -> DirectionSet:
    """Fibonacci-spiral cone of directions with a uniform offset grid.

    half_angle_deg = 90 is hemisphere sampling.  Offsets default to
    +-0.85 v_radius (planes cutting through the support ball); they are
    validated against the open slab interval, where the reconstruction
    identities hold.
    """
    if not 0.0 < half_angle_deg <= 90.0:
        raise ValueError(f"half angle must be in (0, 90] degrees, got {half_angle_deg}")
    if n_directions < 1 or n_offsets < 1:
        raise ValueError("need at least one direction and one offset")
    cos_cap = np.cos(np.deg2rad(half_angle_deg))
    i = np.arange(n_directions)
    z = 1.0 - (1.0 - cos_cap) * (i + 0.5) / n_directions
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = _GOLDEN_ANGLE * i
    normals = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    normals /= np.linalg.norm(normals, axis=1)[:, None]

    if offset_span is None:
        offset_span = 0.85 * domain.v_radius
    offsets = np.linspace(-offset_span, offset_span, n_offsets)
    lo, hi = domain.slab_lo, domain.slab_hi
    if not (offsets[0] > lo and offsets[-1] < hi):
        raise ValueError(
            f"offsets [{offsets[0]:g}, {offsets[-1]:g}] must lie inside the open "
            f"slab interval ({lo:g}, {hi:g})"
        )
    return DirectionSet(
        normals=normals,
        offsets=tuple(offsets.copy() for _ in range(n_directions)),
        half_angle=float(half_angle_deg),
    )


def _check_plane_meets_box(grid: Grid, plane: Plane) -> None:
    L = np.asarray(grid.half_widths)
    reach = float(np.sum(L * np.abs(plane.normal)))
    if not -reach < plane.offset < reach:
        raise ValueError(
            f"plane with offset {plane.offset:g} misses the box (normal reach {reach:g})"
        )


def _axis_aligned_node_slice(grid: Grid, plane: Plane) -> tuple[int, int] | None:
    """(axis, node index) if the plane is an axis-aligned node plane."""
    n = plane.normal
    for axis in range(3):
        rest = np.delete(n, axis)
        if np.max(np.abs(rest)) > _UNIT_TOL:
            continue
        sign = np.sign(n[axis])
        coords = grid.axis_coords(axis)
        target = plane.offset * sign
        idx = int(np.argmin(np.abs(coords - target)))
        if abs(coords[idx] - target) <= 1e-12 * max(1.0, grid.half_widths[axis]):
            return axis, idx
        return None
    return None


def _trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _slice_row(grid: Grid, axis: int, idx: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact tensor-trapezoid quadrature over the node plane, as a row."""
    axes = [a for a in range(3) if a != axis]
    w_a = _trapezoid_weights(grid.shape[axes[0]], grid.spacing[axes[0]])
    w_b = _trapezoid_weights(grid.shape[axes[1]], grid.spacing[axes[1]])
    ia, ib = np.meshgrid(
        np.arange(grid.shape[axes[0]]), np.arange(grid.shape[axes[1]]), indexing="ij"
    )
    sub = [None, None, None]
    sub[axis] = np.full(ia.size, idx)
    sub[axes[0]] = ia.ravel()
    sub[axes[1]] = ib.ravel()
    cols = grid.linear_index(sub[0], sub[1], sub[2])
    weights = (w_a[:, None] * w_b[None, :]).ravel()
    return cols, weights


def _trilinear_scatter(
    grid: Grid, points: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Scatter quadrature weights at arbitrary points onto grid nodes."""
    L = np.asarray(grid.half_widths)
    h = np.asarray(grid.spacing)
    n = np.asarray(grid.shape)
    u = (points + L) / h
    base = np.clip(np.floor(u).astype(np.int64), 0, n - 2)
    frac = u - base

    cols = np.empty(points.shape[0] * 8, dtype=np.int64)
    vals = np.empty(points.shape[0] * 8, dtype=float)
    m = points.shape[0]
    pos = 0
    for da in (0, 1):
        fa = frac[:, 0] if da else 1.0 - frac[:, 0]
        for db in (0, 1):
            fb = frac[:, 1] if db else 1.0 - frac[:, 1]
            for dc in (0, 1):
                fc = frac[:, 2] if dc else 1.0 - frac[:, 2]
                cols[pos : pos + m] = grid.linear_index(
                    base[:, 0] + da, base[:, 1] + db, base[:, 2] + dc
                )
                vals[pos : pos + m] = weights * fa * fb * fc
                pos += m
    return cols, vals


def _embedded_plane_row(grid: Grid, plane: Plane) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint in-plane quadrature scattered through trilinear weights."""
    L = np.asarray(grid.half_widths)
    radius = float(np.linalg.norm(L))
    step = 0.5 * min(grid.spacing)
    m = int(np.ceil(2.0 * radius / step))
    coords = -radius + (np.arange(m) + 0.5) * (2.0 * radius / m)
    ss, tt = np.meshgrid(coords, coords, indexing="ij")
    pts = plane.embed(ss.ravel(), tt.ravel())
    inside = np.all(np.abs(pts) <= L + 1e-12, axis=1)
    pts = np.clip(pts[inside], -L, L)
    if pts.shape[0] == 0:
        raise ValueError("plane quadrature found no points inside the box")
    cell = (2.0 * radius / m) ** 2
    return _trilinear_scatter(grid, pts, np.full(pts.shape[0], cell))


def _mollified_row(
    grid: Grid, plane: Plane, width: float, profile
) -> tuple[np.ndarray, np.ndarray]:
    """Volume-trapezoid row of f -> int f profile(n.x - s) dx."""
    pts = grid.points()
    dist = plane.signed_distance(pts)
    hit = np.abs(dist) < width
    if not np.any(hit):
        raise ValueError(
            f"mollified plane (offset {plane.offset:g}, width {width:g}) misses every node"
        )
    w_vol = grid._to_linear(grid.volume_weights())
    cols = np.nonzero(hit)[0]
    return cols, w_vol[cols] * profile(dist[cols])


def plane_row(
    grid: Grid, plane: Plane, width: float = 0.0, profile=None
) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature row (node ids, weights) realizing the plane integral.

    width = 0 gives the sharp plane integral (exact slice on axis-aligned
    node planes, trilinear-interpolated quadrature otherwise); width > 0
    gives the w-mollified transform with the unit-mass bump, or a custom
    even profile of the signed distance if one is passed.
    """
    _check_plane_meets_box(grid, plane)
    if width < 0.0:
        raise ValueError(f"width must be nonnegative, got {width}")
    if width == 0.0:
        hit = _axis_aligned_node_slice(grid, plane)
        if hit is not None:
            return _slice_row(grid, *hit)
        return _embedded_plane_row(grid, plane)
    if profile is None:
        profile = lambda d: bump_profile(d, width)  # noqa: E731
    return _mollified_row(grid, plane, width, profile)


def plane_integral(
    f: ScalarField, plane: Plane, width: float = 0.0, profile=None
) -> float | complex:
    """Integral of f over the plane (width = 0) or its w-mollification."""
    cols, weights = plane_row(f.grid, plane, width, profile)
    value = np.sum(weights * f.flat()[cols])
    return complex(value) if f.is_complex else float(value)


def radon_samples(
    f: ScalarField, directions: DirectionSet, width: float = 0.0, profile=None
) -> list[RadonSample]:
    """Forward-sample f over every (direction, offset) plane."""
    return [
        RadonSample(plane=p, value=float(np.real(plane_integral(f, p, width, profile))), width=width)
        for p in directions.planes()
    ]


@dataclass(frozen=True)
class RadonInvertReport:
    """Inversion diagnostics: the regularization sweep and the pick.

    flagged is set when even the best candidate leaves a large relative
    residual or conjugate gradients failed to converge -- the data did
    not determine the field beyond the regularization floor.
    """

    mu: float
    mu_candidates: tuple[float, ...]
    residuals: tuple[float, ...]
    solution_norms: tuple[float, ...]
    iterations: tuple[int, ...]
    converged: bool
    flagged: bool
    message: str


def _cg_spd(apply, b: np.ndarray, tol: float, maxiter: int) -> tuple[np.ndarray, int, bool]:
    """Plain conjugate gradients for an SPD operator."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    b_norm = np.sqrt(rr)
    if b_norm == 0.0:
        return x, 0, True
    for it in range(1, maxiter + 1):
        ap = apply(p)
        denom = float(p @ ap)
        if denom <= 0.0:
            return x, it, False
        alpha = rr / denom
        x += alpha * p
        r -= alpha * ap
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= tol * b_norm:
            return x, it, True
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, maxiter, False


#: Norm spread below which the L-curve is treated as corner-free.  When the
#: solution norm barely moves across the whole sweep while the residual keeps
#: dropping, regularization is not limiting stability in the sampled range and
#: the best-fitting (smallest) mu is the defensible pick.
FLAT_LCURVE_NORM_FACTOR = 1.2


def _lcurve_corner(res: np.ndarray, norms: np.ndarray) -> int:
    """Index of maximum curvature of the log-log (residual, norm) curve."""
    x = np.log(np.maximum(res, 1e-300))
    y = np.log(np.maximum(norms, 1e-300))
    if x.size < 3:
        return int(np.argmin(res))
    dx, dy = np.gradient(x), np.gradient(y)
    d2x, d2y = np.gradient(dx), np.gradient(dy)
    kappa = np.abs(dx * d2y - dy * d2x) / np.maximum((dx * dx + dy * dy) ** 1.5, 1e-300)
    return int(np.argmax(kappa))


def _select_mu(res: np.ndarray, norms: np.ndarray, converged: np.ndarray) -> int:
    """Pick a sweep index, candidates ordered by ascending regularization.

    Converged solves are preferred.  A curve whose solution norm varies by
    less than FLAT_LCURVE_NORM_FACTOR end to end has no corner -- the data
    are consistent and stability never degrades in the sampled range -- so
    the smallest (best-fitting) candidate wins.  Otherwise the max-curvature
    corner of the log-log curve is chosen, moved to the nearest converged
    candidate if needed.
    """
    preferred = np.nonzero(converged)[0]
    if preferred.size == 0:
        preferred = np.arange(res.size)
    hi = float(np.max(norms[preferred]))
    lo = float(np.min(norms[preferred]))
    if hi <= FLAT_LCURVE_NORM_FACTOR * max(lo, 1e-300):
        return int(preferred[0])
    corner = _lcurve_corner(res, norms)
    if converged[corner]:
        return corner
    return int(preferred[np.argmin(np.abs(preferred - corner))])


def radon_invert(
    samples: list[RadonSample],
    grid: Grid,
    mu,
    *,
    profile=None,
    tol: float = 1e-8,
    maxiter: int = 2000,
    residual_flag_level: float = 0.5,
) -> tuple[ScalarField, RadonInvertReport]:
    """Recover a V-supported field from plane samples.

    Solves the Tikhonov normal equations (R^T R + mu I) f = R^T g by
    conjugate gradients, with R the plane-quadrature operator restricted
    to nodes inside the support ball.  mu may be a single value or a
    sweep; a sweep picks the corner of the L-curve (max curvature of
    log-residual vs log-norm), falling back to the smallest converged
    candidate when the curve is corner-free (norm essentially flat
    across the sweep).  The result is zero outside V.
    """
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    pts = grid.points()
    v_ids = np.nonzero(grid.domain.in_support_ball(pts))[0]
    if v_ids.size == 0:
        raise ValueError("grid has no nodes inside the support ball")
    col_of = np.full(grid.n_nodes, -1, dtype=np.int64)
    col_of[v_ids] = np.arange(v_ids.size)

    rows_idx, cols_idx, vals = [], [], []
    g = np.empty(len(samples))
    for i, sample in enumerate(samples):
        cols, weights = plane_row(grid, sample.plane, sample.width, profile)
        keep = col_of[cols] >= 0
        rows_idx.append(np.full(int(np.count_nonzero(keep)), i))
        cols_idx.append(col_of[cols[keep]])
        vals.append(weights[keep])
        g[i] = sample.value
    R = scipy.sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows_idx), np.concatenate(cols_idx))),
        shape=(len(samples), v_ids.size),
    )

    rtg = R.T @ g
    g_norm = float(np.linalg.norm(g))
    mus = tuple(float(m) for m in np.atleast_1d(np.asarray(mu, dtype=float)))
    if any(m < 0 for m in mus):
        raise ValueError("regularization must be nonnegative")

    sols, res_list, norm_list, iter_list, conv_list = [], [], [], [], []
    for m in mus:
        apply = lambda x, _m=m: R.T @ (R @ x) + _m * x  # noqa: E731
        x, iters, ok = _cg_spd(apply, rtg, tol, maxiter)
        sols.append(x)
        res_list.append(
            float(np.linalg.norm(R @ x - g)) / g_norm if g_norm > 0 else 0.0
        )
        norm_list.append(float(np.linalg.norm(x)))
        iter_list.append(iters)
        conv_list.append(ok)

    if len(mus) == 1:
        pick = 0
    else:
        order = np.argsort(mus)
        res_arr = np.array(res_list)[order]
        norm_arr = np.array(norm_list)[order]
        conv_arr = np.array(conv_list, dtype=bool)[order]
        pick = int(order[_select_mu(res_arr, norm_arr, conv_arr)])

    converged = bool(conv_list[pick])
    flagged = (not converged) or (g_norm > 0 and res_list[pick] > residual_flag_level)
    if flagged and not converged:
        message = "conjugate gradients did not converge; solution is the last iterate"
    elif flagged:
        message = (
            f"relative residual {res_list[pick]:.3g} stayed above "
            f"{residual_flag_level:g}: data underdetermine the field beyond the "
            "regularization floor"
        )
    else:
        message = "ok"

    flat = np.zeros(grid.n_nodes)
    flat[v_ids] = sols[pick]
    report = RadonInvertReport(
        mu=mus[pick],
        mu_candidates=mus,
        residuals=tuple(res_list),
        solution_norms=tuple(norm_list),
        iterations=tuple(iter_list),
        converged=converged,
        flagged=bool(flagged),
        message=message,
    )
    return ScalarField.from_flat(grid, flat), report
