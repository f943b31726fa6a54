"""Box geometry, slab partition, frames and tensor grids.

The computational domain is the closed box

    Omega = [-L1, L1] x [-L2, L2] x [-L3, L3]

partitioned along a distinguished height coordinate into a flat core,
two transition bands and an outer region,

    A1 = { -t1 < y < t2 },
    A2 = [t2, t2 + d2] u [-t1 - d1, -t1]   (junction heights resolve to A2),
    A3 = the rest,

where y is the third coordinate of an orthonormal frame (the identity
frame uses y = x3).  The accessible boundary patch is the lateral band

    Gamma = { lateral faces } n { -t1 - 2 d1 <= x3 <= t2 + 2 d2 },

i.e. the closure of the measurement slab U intersected with the box
boundary.  The support region V for potential perturbations is a ball
at the origin whose radius stays strictly inside the core slab and the
lateral walls.

Everything here is exact arithmetic on node coordinates; no PDE state.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

_TOL = 1e-12


class Region(enum.Enum):
    """Label of the slab partition along the frame height coordinate."""

    A1 = 1
    A2 = 2
    A3 = 3


@dataclass(frozen=True)
class Domain:
    """Box half-widths plus slab and support parameters.

    half_widths : (L1, L2, L3), all positive.
    t1, t2      : extents of the flat core below/above the height origin.
    d1, d2      : widths of the lower/upper transition bands.
    v_radius    : radius of the support ball V (centered at the origin).
    """

    half_widths: tuple[float, float, float]
    t1: float
    t2: float
    d1: float
    d2: float
    v_radius: float

    def __post_init__(self) -> None:
        L1, L2, L3 = self.half_widths
        if min(L1, L2, L3) <= 0:
            raise ValueError(f"half widths must be positive, got {self.half_widths}")
        for name in ("t1", "t2", "d1", "d2", "v_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.t2 + 2 * self.d2 >= L3 or self.t1 + 2 * self.d1 >= L3:
            raise ValueError(
                "slab must end strictly inside the box: need t + 2*delta < L3, got "
                f"t2+2d2={self.t2 + 2 * self.d2}, t1+2d1={self.t1 + 2 * self.d1}, L3={L3}"
            )
        if self.v_radius >= min(self.t1, self.t2, L1, L2):
            raise ValueError(
                f"v_radius={self.v_radius} must stay below min(t1, t2, L1, L2)="
                f"{min(self.t1, self.t2, L1, L2)}"
            )

    @property
    def slab_lo(self) -> float:
        """Lower edge of the measurement slab U."""
        return -self.t1 - 2 * self.d1

    @property
    def slab_hi(self) -> float:
        """Upper edge of the measurement slab U."""
        return self.t2 + 2 * self.d2

    def classify_height(self, y: np.ndarray) -> np.ndarray:
        """Region labels (integer values of Region) for height coordinates y.

        Junction heights belong to A2; the arrays may have any shape.
        """
        y = np.asarray(y, dtype=float)
        out = np.full(y.shape, Region.A3.value, dtype=np.int8)
        in_a2 = ((y >= self.t2) & (y <= self.t2 + self.d2)) | (
            (y >= -self.t1 - self.d1) & (y <= -self.t1)
        )
        in_a1 = (y > -self.t1) & (y < self.t2)
        out[in_a1] = Region.A1.value
        out[in_a2] = Region.A2.value
        return out

    def in_slab(self, y: np.ndarray) -> np.ndarray:
        """Membership in the closed measurement slab U along the height axis."""
        y = np.asarray(y, dtype=float)
        return (y >= self.slab_lo - _TOL) & (y <= self.slab_hi + _TOL)

    def in_support_ball(self, points: np.ndarray) -> np.ndarray:
        """Membership in the support ball V for world points of shape (..., 3)."""
        points = np.asarray(points, dtype=float)
        return np.sum(points * points, axis=-1) <= self.v_radius**2


@dataclass(frozen=True)
class RegionInfo:
    """Partition labels plus support/slab membership flags for a point set.

    region : int8 array of Region values.
    in_v   : membership in the support ball V (world coordinates).
    in_u   : membership in the closed measurement slab U (frame height).
    """

    region: np.ndarray
    in_v: np.ndarray
    in_u: np.ndarray


def classify_region(
    domain: Domain, points: np.ndarray, frame: "Frame | None" = None
) -> RegionInfo:
    """Classify world points into the slab partition of the given frame.

    Returns region labels together with V-ball and U-slab membership
    flags, all with the leading shape of ``points`` (shape (..., 3)).
    Points outside the closed box raise ValueError.
    """
    points = np.asarray(points, dtype=float)
    if points.shape[-1] != 3:
        raise ValueError(f"points must have trailing dimension 3, got {points.shape}")
    L = np.asarray(domain.half_widths)
    outside = np.abs(points) > L + _TOL * np.maximum(L, 1.0)
    if np.any(outside):
        bad = points[np.any(outside, axis=-1)][:1]
        raise ValueError(f"point outside the box {tuple(L)}: {bad.reshape(-1)[:3]}")
    if frame is None or frame.is_identity:
        height = points[..., 2]
    else:
        height = points @ frame.rotation[:, 2]
    return RegionInfo(
        region=domain.classify_height(height),
        in_v=domain.in_support_ball(points),
        in_u=domain.in_slab(height),
    )


@dataclass(frozen=True)
class Frame:
    """Proper orthonormal frame; columns of ``rotation`` are the frame axes.

    Frame coordinates of a world point x are y = R^T x, so the third
    column is the height direction of the rotated slab structure.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self) -> None:
        R = np.array(self.rotation, dtype=float)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got shape {R.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-12):
            raise ValueError("rotation must be orthogonal to 1e-12")
        if not np.isclose(np.linalg.det(R), 1.0, atol=1e-12):
            raise ValueError(f"rotation must be proper (det=1), got det={np.linalg.det(R)}")
        R.flags.writeable = False
        object.__setattr__(self, "rotation", R)

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)))

    @property
    def normal(self) -> np.ndarray:
        """World direction of the frame height axis (third column)."""
        return self.rotation[:, 2]

    def world_to_frame(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation

    def frame_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T

    @staticmethod
    def from_normal(normal: np.ndarray) -> "Frame":
        """Frame whose height axis is the given direction.

        The in-plane axes are chosen deterministically by Gram-Schmidt
        against the world axis least aligned with the normal.
        """
        n = np.asarray(normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm < 1e-14:
            raise ValueError("normal must be nonzero")
        n = n / norm
        seed_axis = int(np.argmin(np.abs(n)))
        e1 = np.zeros(3)
        e1[seed_axis] = 1.0
        e1 = e1 - np.dot(e1, n) * n
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return Frame(np.column_stack([e1, e2, n]))


@dataclass(frozen=True)
class Plane:
    """Oriented plane { x : <n, x> = offset }, n = height axis of ``frame``.

    The frame fixes both the normal and a deterministic in-plane
    coordinate system (its first two axes), which plane quadratures use.
    """

    frame: "Frame"
    offset: float

    @property
    def normal(self) -> np.ndarray:
        return self.frame.normal

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.normal - self.offset

    def embed(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        """World coordinates of in-plane coordinates (s, t), shape (..., 3)."""
        R = self.frame.rotation
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        return (
            s[..., None] * R[:, 0] + t[..., None] * R[:, 1] + self.offset * R[:, 2]
        )

    def check_meets_slab(self, domain: Domain) -> None:
        """Require the plane to pass through the open slab U of its frame."""
        if not (domain.slab_lo < self.offset < domain.slab_hi):
            raise ValueError(
                f"plane offset {self.offset} misses the open slab "
                f"({domain.slab_lo}, {domain.slab_hi})"
            )

    @staticmethod
    def from_normal(normal: np.ndarray, offset: float) -> "Plane":
        return Plane(Frame.from_normal(normal), float(offset))


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on the domain box, node-centered, boundary included.

    Nodes along axis i sit at -L_i + m * h_i, m = 0..n_i-1, with
    h_i = 2 L_i / (n_i - 1).  Linear (serialization) index of node
    (i, j, k) is (k * n2 + j) * n1 + i, i.e. the first axis varies
    fastest.  Field arrays are kept in (n1, n2, n3) index order.
    """

    domain: Domain
    shape: tuple[int, int, int]

    def __post_init__(self) -> None:
        if any(n < 3 for n in self.shape):
            raise ValueError(f"need at least 3 nodes per axis, got {self.shape}")

    @property
    def spacing(self) -> tuple[float, float, float]:
        L = self.half_widths
        return tuple(2 * L[i] / (self.shape[i] - 1) for i in range(3))

    @property
    def half_widths(self) -> tuple[float, float, float]:
        return self.domain.half_widths

    @property
    def n_nodes(self) -> int:
        n1, n2, n3 = self.shape
        return n1 * n2 * n3

    def axis_coords(self, axis: int) -> np.ndarray:
        L = self.half_widths[axis]
        return np.linspace(-L, L, self.shape[axis])

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Coordinate arrays X1, X2, X3 each of shape ``self.shape``."""
        return tuple(
            np.meshgrid(
                self.axis_coords(0), self.axis_coords(1), self.axis_coords(2), indexing="ij"
            )
        )

    def points(self) -> np.ndarray:
        """All node coordinates, shape (n_nodes, 3), in linear index order."""
        X1, X2, X3 = self.meshgrid()
        return np.column_stack(
            [self._to_linear(X1), self._to_linear(X2), self._to_linear(X3)]
        )

    def _to_linear(self, values: np.ndarray) -> np.ndarray:
        """Flatten an (n1, n2, n3) array into linear index order."""
        return np.ascontiguousarray(values.transpose(2, 1, 0)).reshape(-1)

    def _from_linear(self, flat: np.ndarray) -> np.ndarray:
        n1, n2, n3 = self.shape
        return np.ascontiguousarray(flat.reshape(n3, n2, n1).transpose(2, 1, 0))

    def linear_index(self, i: np.ndarray, j: np.ndarray, k: np.ndarray) -> np.ndarray:
        n1, n2, _ = self.shape
        return (np.asarray(k) * n2 + np.asarray(j)) * n1 + np.asarray(i)

    def interior_mask(self) -> np.ndarray:
        """Boolean (n1, n2, n3) mask of strictly interior nodes."""
        m = np.zeros(self.shape, dtype=bool)
        m[1:-1, 1:-1, 1:-1] = True
        return m

    def boundary_mask(self) -> np.ndarray:
        return ~self.interior_mask()

    def volume_weights(self) -> np.ndarray:
        """Tensor-trapezoid volume weights, shape ``self.shape``."""
        w = []
        for axis in range(3):
            h = self.spacing[axis]
            wa = np.full(self.shape[axis], h)
            wa[0] = wa[-1] = h / 2
            w.append(wa)
        return w[0][:, None, None] * w[1][None, :, None] * w[2][None, None, :]


# Outward normals of the six faces, ordered (axis, side):
# face id 2*axis + (0 for the -L side, 1 for the +L side).
_FACE_AXIS = np.array([0, 0, 1, 1, 2, 2])
_FACE_SIGN = np.array([-1, 1, -1, 1, -1, 1])


@dataclass(frozen=True)
class BoundaryNodes:
    """Deduplicated boundary node set with quadrature and Gamma labeling.

    index     : linear node indices, shape (N,).
    subscripts: integer (i, j, k) subscripts, shape (N, 3).
    coords    : world coordinates, shape (N, 3).
    normal_axis, normal_sign : tie-break outward normal of each node
        (lowest incident axis wins; only relevant on box edges).
    weight    : surface quadrature weight, the sum over incident faces of
        the per-face tangential trapezoid weights.  Summing ``weight``
        over all nodes reproduces the total surface area exactly.
    in_gamma  : True where the node lies on Gamma.  A node is excluded
        if ANY of its incident faces leaves the slab band, so top/bottom
        face nodes and lateral nodes above/below the slab are all out.
    """

    index: np.ndarray
    subscripts: np.ndarray
    coords: np.ndarray
    normal_axis: np.ndarray
    normal_sign: np.ndarray
    weight: np.ndarray
    in_gamma: np.ndarray

    def __len__(self) -> int:
        return self.index.shape[0]

    @property
    def normals(self) -> np.ndarray:
        """Outward unit normals, shape (N, 3)."""
        out = np.zeros((len(self), 3))
        out[np.arange(len(self)), self.normal_axis] = self.normal_sign
        return out


def boundary_decompose(grid: Grid) -> BoundaryNodes:
    """Enumerate boundary nodes with trapezoid weights and Gamma labels."""
    n1, n2, n3 = grid.shape
    domain = grid.domain
    I, J, K = np.meshgrid(np.arange(n1), np.arange(n2), np.arange(n3), indexing="ij")
    on_bdry = grid.boundary_mask()
    i = I[on_bdry]
    j = J[on_bdry]
    k = K[on_bdry]
    subs = np.column_stack([i, j, k])

    coords = np.column_stack(
        [grid.axis_coords(0)[i], grid.axis_coords(1)[j], grid.axis_coords(2)[k]]
    )

    # Incident faces: (N, 6) booleans in face-id order.
    at_lo = subs == 0
    at_hi = subs == np.array(grid.shape) - 1
    incident = np.zeros((len(i), 6), dtype=bool)
    incident[:, 0::2] = at_lo
    incident[:, 1::2] = at_hi

    # Tangential trapezoid weight of a node within a face of axis a:
    # product of the 1-D trapezoid weights of the two other axes.
    axis_w = []
    for axis in range(3):
        h = grid.spacing[axis]
        wa = np.full(grid.shape[axis], h)
        wa[0] = wa[-1] = h / 2
        axis_w.append(wa)
    w1 = axis_w[0][i]
    w2 = axis_w[1][j]
    w3 = axis_w[2][k]
    tangential = np.stack(
        [w2 * w3, w2 * w3, w1 * w3, w1 * w3, w1 * w2, w1 * w2], axis=1
    )
    weight = np.sum(tangential * incident, axis=1)

    # Tie-break normal: lowest incident axis.
    face_ids = np.argmax(incident, axis=1)
    normal_axis = _FACE_AXIS[face_ids]
    normal_sign = _FACE_SIGN[face_ids].astype(float)

    # Gamma: every incident face must be a lateral face, and the node
    # height must sit inside the closed slab band.
    lateral_only = ~(incident[:, 4] | incident[:, 5])
    x3 = coords[:, 2]
    in_band = (x3 >= domain.slab_lo - _TOL) & (x3 <= domain.slab_hi + _TOL)
    in_gamma = lateral_only & in_band

    lin = grid.linear_index(i, j, k)
    order = np.argsort(lin, kind="stable")
    out = BoundaryNodes(
        index=lin[order],
        subscripts=subs[order],
        coords=coords[order],
        normal_axis=normal_axis[order],
        normal_sign=normal_sign[order],
        weight=weight[order],
        in_gamma=in_gamma[order],
    )
    for arr in (out.index, out.subscripts, out.coords, out.normal_axis,
                out.normal_sign, out.weight, out.in_gamma):
        arr.flags.writeable = False
    return out


def gamma_area(boundary: BoundaryNodes) -> float:
    """Quadrature area of Gamma (sum of Gamma node weights)."""
    return float(np.sum(boundary.weight[boundary.in_gamma]))
