"""Spherical-volume post-processing and Cartesian voxelization.

Cell-averaging CFAR along range, linear range compensation normalized to
unit gain at the farthest bin, trilinear resampling into the Cartesian
voxel grid, and the per-voxel max combination of multiple sensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .beamforming import SphericalVolume
from .geometry import RigidTransform, SphericalGrid, VoxelGrid, cartesian_to_spherical

Array = np.ndarray


@dataclass(frozen=True)
class CfarParams:
    training_cells: int = 8
    guard_cells: int = 2
    design_pfa: float = 1e-3

    def __post_init__(self):
        if self.training_cells < 1:
            raise ValueError("training_cells must be >= 1")
        if self.guard_cells < 0:
            raise ValueError("guard_cells must be >= 0")
        if not 0.0 < self.design_pfa < 1.0:
            raise ValueError("design_pfa must lie in (0, 1)")


@dataclass
class Volume:
    """Cartesian intensity map, layout [H, D, W] = (y, z, x)."""

    values: Array
    grid: VoxelGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} does not match grid dims {self.grid.shape}")


def ca_cfar(vol: SphericalVolume, params: CfarParams) -> SphericalVolume:
    """Cell-averaging CFAR along the range axis, per beam.

    Each cell is compared with alpha * mean(training cells), where the
    training window of ``training_cells`` per side is separated from the
    cell by ``guard_cells`` and alpha = N * (pfa^(-1/N) - 1) for the
    actual in-bounds training count N (edge cells use one-sided windows).
    Cells at or below the threshold are zeroed; the rest keep their value.
    """
    t, g, pfa = params.training_cells, params.guard_cells, params.design_pfa
    n_r = vol.grid.r_bins
    if n_r <= 2 * (t + g):
        raise ValueError(f"CFAR needs r_bins > {2 * (t + g)} for training={t}, guard={g}; got {n_r}")
    v = vol.values  # [phi, r, theta]
    csum = np.zeros((v.shape[0], n_r + 1, v.shape[2]))
    np.cumsum(v, axis=1, out=csum[:, 1:])

    out = np.zeros_like(v)
    for i in range(n_r):
        lo1, hi1 = max(0, i - g - t), max(0, i - g)          # left training [lo1, hi1)
        lo2, hi2 = min(n_r, i + g + 1), min(n_r, i + g + 1 + t)  # right training [lo2, hi2)
        n = (hi1 - lo1) + (hi2 - lo2)
        if n == 0:
            continue
        alpha = n * (pfa ** (-1.0 / n) - 1.0)
        train_sum = (csum[:, hi1] - csum[:, lo1]) + (csum[:, hi2] - csum[:, lo2])
        threshold = alpha * train_sum / n
        cell = v[:, i]
        out[:, i] = np.where(cell > threshold, cell, 0.0)
    return SphericalVolume(values=out, grid=vol.grid, warning_count=vol.warning_count)


def range_compensate(vol: SphericalVolume) -> SphericalVolume:
    """Linear range gain r / r_far, so the farthest bin is unchanged."""
    r_c = vol.grid.r_centers()
    gain = r_c / r_c[-1]
    return SphericalVolume(values=vol.values * gain[None, :, None], grid=vol.grid,
                           warning_count=vol.warning_count)


def resample_to_cartesian(vol: SphericalVolume, out_grid: VoxelGrid,
                          sensor_to_world: RigidTransform | None = None) -> Volume:
    """Trilinear resampling of a spherical volume onto Cartesian voxel centers.

    Each voxel center is pulled back into the sensor frame and looked up in
    (phi, r, theta) index space; interpolation clamps to edge bin centers
    and voxels outside the spherical field of view are zero.
    """
    if sensor_to_world is None:
        sensor_to_world = RigidTransform.identity()
    g = vol.grid
    centers = out_grid.voxel_centers()  # [H, D, W, 3]
    local = sensor_to_world.inverse().apply(centers.reshape(-1, 3))
    r, theta, phi = cartesian_to_spherical(local)

    th_lo, th_hi = g.theta_bounds
    ph_lo, ph_hi = g.phi_bounds
    in_fov = ((r >= g.r_min) & (r <= g.r_max)
              & (theta >= th_lo) & (theta <= th_hi)
              & (phi >= ph_lo) & (phi <= ph_hi))

    fr = (r - g.r_min) / g.r_step - 0.5
    ft = (theta - th_lo) / ((th_hi - th_lo) / g.theta_bins) - 0.5
    fp = (phi - ph_lo) / ((ph_hi - ph_lo) / g.phi_bins) - 0.5
    vals = _trilinear(vol.values, fp, fr, ft)
    vals[~in_fov] = 0.0
    return Volume(values=vals.reshape(out_grid.shape), grid=out_grid)


def _trilinear(data: Array, f0: Array, f1: Array, f2: Array) -> Array:
    """Trilinear sample of data[i0, i1, i2] at fractional indices, edge-clamped."""
    out = np.zeros(f0.shape)
    acc = [None, None, None]
    for axis, f in enumerate((f0, f1, f2)):
        n = data.shape[axis]
        fc = np.clip(f, 0.0, n - 1.0)
        lo = np.minimum(np.floor(fc).astype(np.int64), n - 1 if n == 1 else n - 2)
        frac = fc - lo
        acc[axis] = (lo, frac)
    (i0, w0), (i1, w1), (i2, w2) = acc
    for d0 in (0, 1):
        for d1 in (0, 1):
            for d2 in (0, 1):
                j0 = np.minimum(i0 + d0, data.shape[0] - 1)
                j1 = np.minimum(i1 + d1, data.shape[1] - 1)
                j2 = np.minimum(i2 + d2, data.shape[2] - 1)
                weight = (np.where(d0, w0, 1 - w0)
                          * np.where(d1, w1, 1 - w1)
                          * np.where(d2, w2, 1 - w2))
                out += weight * data[j0, j1, j2]
    return out


def merge_volumes(a: Volume, b: Volume) -> Volume:
    """Per-voxel maximum; preserves detections from either sensor."""
    if a.grid != b.grid:
        raise ValueError("cannot merge volumes on different grids")
    return Volume(values=np.maximum(a.values, b.values), grid=a.grid)


def threshold_to_points(vol: Volume, threshold: float) -> Array:
    """Centers of voxels whose intensity exceeds the threshold, as an (N, 3) cloud.

    Bridges the intensity map to the point-level cleanup ops (ground/ego
    removal, clustering) for pipelines that want them on ultrasound data.
    """
    mask = vol.values > threshold
    if not mask.any():
        return np.zeros((0, 3))
    return vol.grid.voxel_centers()[mask]
