"""Coordinate conventions, rigid transforms and oriented-box geometry.

World axes: x right, y up, z forward (meters). Azimuth is measured from +z
toward +x, elevation from the xz-plane toward +y, so boresight is
(theta, phi) = (0, 0) and maps to +z. Angles are radians everywhere in
memory; serialized files use degrees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


def spherical_to_cartesian(r, theta, phi) -> Array:
    """Map range / azimuth / elevation to (x, y, z).

    Accepts scalars or broadcastable arrays; returns an array with a
    trailing axis of length 3.
    """
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    x = r * np.cos(phi) * np.sin(theta)
    y = r * np.sin(phi)
    z = r * np.cos(phi) * np.cos(theta)
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def cartesian_to_spherical(points: Array) -> tuple[Array, Array, Array]:
    """Inverse of :func:`spherical_to_cartesian`; returns (r, theta, phi)."""
    p = np.asarray(points, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r = np.sqrt(x * x + y * y + z * z)
    theta = np.arctan2(x, z)
    phi = np.arctan2(y, np.hypot(x, z))
    return r, theta, phi


def yaw_matrix(yaw: float) -> Array:
    """Rotation about +y; positive yaw turns +z toward +x (azimuth sense)."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def pitch_matrix(pitch: float) -> Array:
    """Rotation about +x; positive pitch tilts +z up toward +y."""
    c, s = np.cos(pitch), np.sin(pitch)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion p -> R p + t.

    Constructed from mounting parameters via :meth:`from_yaw_pitch`
    (rotation applied yaw first, then pitch). The rotation is kept as a
    full matrix so that compositions and inverses stay closed under the
    same type.
    """

    rotation: Array = field(default_factory=lambda: np.eye(3))
    translation: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_yaw_pitch(cls, translation, yaw: float = 0.0, pitch: float = 0.0) -> "RigidTransform":
        return cls(pitch_matrix(pitch) @ yaw_matrix(yaw), np.asarray(translation, dtype=float))

    def apply(self, points: Array) -> Array:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def apply_transform(t: RigidTransform, points: Array) -> Array:
    return t.apply(points)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equal to applying b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


@dataclass(frozen=True)
class OrientedBox:
    """Box parameterized by center, extents and yaw about +y.

    The l extent runs along the box frame x-axis, w along the box frame
    z-axis and h along y. Containment is boundary-inclusive.
    """

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0
    label: str = "vehicle"

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got l={self.l} w={self.w} h={self.h}")

    @property
    def center(self) -> Array:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h


def point_in_box(points: Array, box: OrientedBox, inflate: float = 0.0):
    """Boundary-inclusive containment test; vectorized over leading axes."""
    p = np.asarray(points, dtype=float)
    d = p - box.center
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    # box-frame coordinates: rotate the offset by -yaw about +y
    lx = c * d[..., 0] - s * d[..., 2]
    ly = d[..., 1]
    lz = s * d[..., 0] + c * d[..., 2]
    hx, hy, hz = box.l / 2 + inflate, box.h / 2 + inflate, box.w / 2 + inflate
    inside = (np.abs(lx) <= hx) & (np.abs(ly) <= hy) & (np.abs(lz) <= hz)
    return bool(inside) if inside.ndim == 0 else inside


def box_corners(box: OrientedBox) -> Array:
    """Eight corners, shape (8, 3), in world coordinates."""
    sx, sy, sz = box.l / 2, box.h / 2, box.w / 2
    signs = np.array([(i, j, k) for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=float)
    local = signs * np.array([sx, sy, sz])
    return local @ yaw_matrix(box.yaw).T + box.center


@dataclass(frozen=True)
class SphericalGrid:
    """Beamforming lattice: range bins plus azimuth/elevation bins.

    Bin k of any axis is centered at lo + (k + 0.5) * step. The default
    configuration is r 0..12 m at 0.125 m (96 bins), azimuth
    [-90 deg, 90 deg] x 64, elevation [-10 deg, 30 deg] x 64.
    """

    r_min: float = 0.0
    r_max: float = 12.0
    r_step: float = 0.125
    theta_bounds: tuple[float, float] = (-np.pi / 2, np.pi / 2)
    theta_bins: int = 64
    phi_bounds: tuple[float, float] = (np.deg2rad(-10.0), np.deg2rad(30.0))
    phi_bins: int = 64

    def __post_init__(self):
        if self.theta_bins <= 0 or self.phi_bins <= 0:
            raise ValueError("bin counts must be positive")
        n = (self.r_max - self.r_min) / self.r_step
        if abs(n - round(n)) > 1e-9 or round(n) <= 0:
            raise ValueError(f"range span {self.r_max - self.r_min} is not a whole number of {self.r_step} m bins")

    @property
    def r_bins(self) -> int:
        return int(round((self.r_max - self.r_min) / self.r_step))

    @property
    def shape(self) -> tuple[int, int, int]:
        # volume layout [phi, r, theta]
        return (self.phi_bins, self.r_bins, self.theta_bins)

    def r_centers(self) -> Array:
        return self.r_min + (np.arange(self.r_bins) + 0.5) * self.r_step

    def theta_centers(self) -> Array:
        lo, hi = self.theta_bounds
        step = (hi - lo) / self.theta_bins
        return lo + (np.arange(self.theta_bins) + 0.5) * step

    def phi_centers(self) -> Array:
        lo, hi = self.phi_bounds
        step = (hi - lo) / self.phi_bins
        return lo + (np.arange(self.phi_bins) + 0.5) * step

    def bin_center(self, phi_idx: int, r_idx: int, theta_idx: int) -> Array:
        """Cartesian center of one (phi, r, theta) bin."""
        return spherical_to_cartesian(
            self.r_centers()[r_idx], self.theta_centers()[theta_idx], self.phi_centers()[phi_idx]
        )


@dataclass(frozen=True)
class VoxelGrid:
    """Cartesian lattice; dims ordered (height H over y, depth D over z, width W over x)."""

    x_bounds: tuple[float, float] = (-12.0, 12.0)
    y_bounds: tuple[float, float] = (-2.0, 6.0)
    z_bounds: tuple[float, float] = (0.0, 12.0)
    dims: tuple[int, int, int] = (64, 96, 64)

    def __post_init__(self):
        if any(d <= 0 for d in self.dims):
            raise ValueError("voxel dims must be positive")
        for lo, hi in (self.x_bounds, self.y_bounds, self.z_bounds):
            if not lo < hi:
                raise ValueError("voxel bounds must satisfy min < max")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    def axis_centers(self) -> tuple[Array, Array, Array]:
        """Per-axis voxel centers (y, z, x) matching the (H, D, W) layout."""
        h, d, w = self.dims
        return (
            _centers(self.y_bounds, h),
            _centers(self.z_bounds, d),
            _centers(self.x_bounds, w),
        )

    def voxel_centers(self) -> Array:
        """All voxel centers, shape (H, D, W, 3) in (x, y, z) components."""
        yc, zc, xc = self.axis_centers()
        y, z, x = np.meshgrid(yc, zc, xc, indexing="ij")
        return np.stack([x, y, z], axis=-1)


def _centers(bounds: tuple[float, float], n: int) -> Array:
    lo, hi = bounds
    step = (hi - lo) / n
    return lo + (np.arange(n) + 0.5) * step
