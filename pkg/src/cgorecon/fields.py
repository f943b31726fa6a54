"""Grid fields: finite-difference calculus, quadrature, traces, file format.

All stencils are second-order accurate including at the boundary:
gradients use one-sided 3-point ends, second derivatives one-sided
4-point ends (both exact on cubics along each line).  Quadrature is
tensor trapezoid.  Fields live in (n1, n2, n3) index order; the
serialization order (first axis fastest) is handled by the grid.

File format ``QGRID1``: 8-byte magic ``b"QGRID1\\n\\0"``, three uint64
little-endian axis sizes, one uint8 flag (0 real, 1 complex), then the
node values as float64 little-endian in linear node order (complex as
re, im pairs per node).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import BoundaryNodes, Grid

QGRID_MAGIC = b"QGRID1\n\0"


@dataclass(frozen=True)
class ScalarField:
    """Nodal scalar field on a tensor grid; values shape == grid.shape."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} != grid shape {self.grid.shape}")
        if not np.issubdtype(v.dtype, np.inexact):
            v = v.astype(float)
        object.__setattr__(self, "values", v)

    @property
    def is_complex(self) -> bool:
        return bool(np.iscomplexobj(self.values))

    def flat(self) -> np.ndarray:
        """Values in linear node order (first axis fastest)."""
        return self.grid._to_linear(self.values)

    @staticmethod
    def from_flat(grid: Grid, flat: np.ndarray) -> "ScalarField":
        return ScalarField(grid, grid._from_linear(np.asarray(flat)))

    @staticmethod
    def from_function(grid: Grid, fn) -> "ScalarField":
        X1, X2, X3 = grid.meshgrid()
        return ScalarField(grid, np.asarray(fn(X1, X2, X3)))


@dataclass(frozen=True)
class BoundaryField:
    """Values attached to the nodes of a boundary decomposition."""

    boundary: BoundaryNodes
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.shape != (len(self.boundary),):
            raise ValueError(
                f"values shape {v.shape} != ({len(self.boundary)},) boundary nodes"
            )
        object.__setattr__(self, "values", v)


def _diff1(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    """First derivative along an axis: central interior, 3-point ends."""
    v = np.moveaxis(values, axis, 0)
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - v[:-2]) / (2 * h)
    out[0] = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * h)
    out[-1] = (3 * v[-1] - 4 * v[-2] + v[-3]) / (2 * h)
    return np.moveaxis(out, 0, axis)


def _diff2(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Second derivative along an axis: central interior, 4-point ends."""
    v = np.moveaxis(values, axis, 0)
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / (h * h)
    out[0] = (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / (h * h)
    out[-1] = (2 * v[-1] - 5 * v[-2] + 4 * v[-3] - v[-4]) / (h * h)
    return np.moveaxis(out, 0, axis)


def gradient(field: ScalarField) -> tuple[ScalarField, ScalarField, ScalarField]:
    """Componentwise discrete gradient, second order everywhere."""
    h = field.grid.spacing
    return tuple(
        ScalarField(field.grid, _diff1(field.values, h[a], a)) for a in range(3)
    )


def laplacian(field: ScalarField) -> ScalarField:
    """Discrete Laplacian, second order everywhere (one-sided at faces)."""
    h = field.grid.spacing
    out = _diff2(field.values, h[0], 0)
    out = out + _diff2(field.values, h[1], 1)
    out = out + _diff2(field.values, h[2], 2)
    return ScalarField(field.grid, out)


def integrate_volume(field: ScalarField, weight_mask: np.ndarray | None = None) -> complex | float:
    """Trapezoid volume integral, optionally masked/nodal-weighted."""
    w = field.grid.volume_weights()
    if weight_mask is not None:
        w = w * weight_mask
    total = np.sum(w * field.values)
    return complex(total) if field.is_complex else float(total)


def integrate_boundary(bfield: BoundaryField, mask: np.ndarray | None = None) -> complex | float:
    """Surface integral of a boundary field with the stored trapezoid weights."""
    w = bfield.boundary.weight
    v = bfield.values
    if mask is not None:
        w = w * mask
    total = np.sum(w * v)
    return complex(total) if np.iscomplexobj(v) else float(total)


def trace(field: ScalarField, boundary: BoundaryNodes) -> BoundaryField:
    """Restrict a grid field to the boundary nodes."""
    s = boundary.subscripts
    return BoundaryField(boundary, field.values[s[:, 0], s[:, 1], s[:, 2]])


def normal_derivative(field: ScalarField, boundary: BoundaryNodes) -> BoundaryField:
    """Outward normal derivative by one-sided 3-point differences.

    Second-order accurate; uses the tie-break normal of each boundary
    node (edge and corner nodes differentiate along a single axis).
    """
    v = field.values
    grid = field.grid
    s = boundary.subscripts
    out = np.empty(len(boundary), dtype=v.dtype)
    for axis in range(3):
        h = grid.spacing[axis]
        for sign in (-1.0, 1.0):
            sel = (boundary.normal_axis == axis) & (boundary.normal_sign == sign)
            if not np.any(sel):
                continue
            idx = [s[sel, 0], s[sel, 1], s[sel, 2]]
            step = -1 if sign > 0 else 1  # inward
            i0 = tuple(idx)
            idx1 = [a.copy() for a in idx]
            idx1[axis] = idx1[axis] + step
            idx2 = [a.copy() for a in idx]
            idx2[axis] = idx2[axis] + 2 * step
            f0 = v[tuple(i0)]
            f1 = v[tuple(idx1)]
            f2 = v[tuple(idx2)]
            # outward one-sided derivative: (3 f0 - 4 f1 + f2) / (2h) toward +normal
            out[sel] = (3 * f0 - 4 * f1 + f2) / (2 * h)
    return BoundaryField(boundary, out)


def normal_derivative_4pt(field: ScalarField, boundary) -> BoundaryField:
    """Third-order one-sided outward normal derivative at boundary nodes.

    (11 f0 - 18 f1 + 9 f2 - 2 f3) / (6h) with f_m the m-th node inward;
    used where the O(h^3) truncation error matters (membership checks).
    Falls back to the second-order stencil on grids under 4 nodes.
    """
    grid = field.grid
    if min(grid.shape) < 4:
        return normal_derivative(field, boundary)
    v = field.values
    s = boundary.subscripts
    out = np.empty(len(boundary), dtype=v.dtype)
    for axis in range(3):
        h = grid.spacing[axis]
        for sign in (-1.0, 1.0):
            sel = (boundary.normal_axis == axis) & (boundary.normal_sign == sign)
            if not np.any(sel):
                continue
            step = -1 if sign > 0 else 1  # inward
            samples = []
            for m in range(4):
                idx = [s[sel, 0].copy(), s[sel, 1].copy(), s[sel, 2].copy()]
                idx[axis] = idx[axis] + m * step
                samples.append(v[tuple(idx)])
            out[sel] = (
                11 * samples[0] - 18 * samples[1] + 9 * samples[2] - 2 * samples[3]
            ) / (6 * h)
    return BoundaryField(boundary, out)


def boundary_pairing(f: BoundaryField, g: BoundaryField, mask: np.ndarray | None = None) -> complex:
    """Weighted surface pairing <f, g> = sum w_i f_i g_i (no conjugation)."""
    if f.boundary is not g.boundary and len(f.boundary) != len(g.boundary):
        raise ValueError("boundary fields must share a node set")
    w = f.boundary.weight
    if mask is not None:
        w = w * mask
    return complex(np.sum(w * f.values * g.values))


def green_pairing(u: ScalarField, w: ScalarField, boundary=None) -> complex:
    """Discrete defect of Green's second identity for two fields.

        defect = sum_bdry weight * (w dnu_u - u dnu_w)
                 - sum_vol weight * (w Lap u - u Lap w)

    Exactly antisymmetric under swapping u and w; O(h^2)-small for
    smooth fields because both quadratures are second-order consistent.
    """
    if u.grid is not w.grid and u.grid.shape != w.grid.shape:
        raise ValueError("fields must share a grid")
    from .geometry import boundary_decompose

    if boundary is None:
        boundary = boundary_decompose(u.grid)
    dnu_u = normal_derivative(u, boundary)
    dnu_w = normal_derivative(w, boundary)
    tr_u = trace(u, boundary)
    tr_w = trace(w, boundary)
    surface = boundary_pairing(tr_w, dnu_u) - boundary_pairing(tr_u, dnu_w)
    lap_u = laplacian(u)
    lap_w = laplacian(w)
    bulk = integrate_volume(
        ScalarField(u.grid, w.values * lap_u.values - u.values * lap_w.values)
    )
    return complex(surface - bulk)


def interpolate_trilinear(field: ScalarField, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at world points of shape (..., 3).

    Points must lie inside the closed box (a 1e-9-relative margin is
    clamped; anything farther out raises).
    """
    grid = field.grid
    points = np.asarray(points, dtype=float)
    shape = points.shape[:-1]
    pts = points.reshape(-1, 3)
    L = np.asarray(grid.half_widths)
    h = np.asarray(grid.spacing)
    tol = 1e-9 * np.max(L)
    if np.any(pts < -L - tol) or np.any(pts > L + tol):
        raise ValueError("interpolation points fall outside the domain box")
    pts = np.clip(pts, -L, L)
    # fractional index coordinates
    u = (pts + L) / h
    n = np.array(grid.shape)
    i0 = np.minimum(u.astype(int), n - 2)
    f = u - i0
    v = field.values
    out = np.zeros(pts.shape[0], dtype=v.dtype)
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                wgt = (
                    (f[:, 0] if di else 1 - f[:, 0])
                    * (f[:, 1] if dj else 1 - f[:, 1])
                    * (f[:, 2] if dk else 1 - f[:, 2])
                )
                out += wgt * v[i0[:, 0] + di, i0[:, 1] + dj, i0[:, 2] + dk]
    return out.reshape(shape)


def write_qgrid(path, field: ScalarField) -> None:
    """Serialize a field to the QGRID1 binary format (bit-exact round-trip)."""
    flat = field.flat()
    flag = 1 if field.is_complex else 0
    n1, n2, n3 = field.grid.shape
    with open(path, "wb") as fh:
        fh.write(QGRID_MAGIC)
        fh.write(struct.pack("<QQQB", n1, n2, n3, flag))
        if flag:
            data = np.empty(2 * flat.size, dtype="<f8")
            data[0::2] = flat.real
            data[1::2] = flat.imag
        else:
            data = flat.astype("<f8", copy=False)
        fh.write(data.tobytes())


def read_qgrid(path, grid: Grid | None = None, domain=None) -> ScalarField:
    """Read a QGRID1 file.  Supply either the grid or the domain it spans."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != QGRID_MAGIC:
            raise ValueError(f"bad magic {magic!r}; expected {QGRID_MAGIC!r}")
        n1, n2, n3, flag = struct.unpack("<QQQB", fh.read(25))
        if flag not in (0, 1):
            raise ValueError(f"bad dtype flag {flag}")
        count = n1 * n2 * n3 * (2 if flag else 1)
        raw = np.frombuffer(fh.read(count * 8), dtype="<f8")
        if raw.size != count:
            raise ValueError("truncated QGRID1 payload")
    if flag:
        flat = raw[0::2] + 1j * raw[1::2]
    else:
        flat = raw.copy()
    if grid is None:
        if domain is None:
            raise ValueError("need a grid or a domain to place the field")
        grid = Grid(domain, (int(n1), int(n2), int(n3)))
    if grid.shape != (n1, n2, n3):
        raise ValueError(f"file shape {(n1, n2, n3)} != grid shape {grid.shape}")
    return ScalarField.from_flat(grid, flat)
