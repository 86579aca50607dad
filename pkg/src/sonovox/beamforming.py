"""DAS and MVDR beamforming of raw RF frames into spherical intensity volumes.

Both beamformers share the same near-field delay model: the round trip is
tx -> bin center -> element. DAS stores the envelope magnitude of the
delayed-and-summed analytic signal; MVDR stores Capon output power per
range gate, with the covariance estimated from fast-time snapshots inside
the gate and a narrowband steering vector at the carrier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.signal

from .geometry import SphericalGrid, spherical_to_cartesian
from .scene import ArrayGeometry, RfFrame

Array = np.ndarray

# diagonal loading floor used when the snapshot energy is exactly zero
LOADING_FLOOR = 1e-12
CONDITION_LIMIT = 1e12


class SingularCovarianceError(np.linalg.LinAlgError):
    """Covariance is singular or too ill-conditioned to invert."""


@dataclass
class SphericalVolume:
    """Non-negative intensity on a spherical grid, layout [phi, r, theta]."""

    values: Array
    grid: SphericalGrid
    warning_count: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} does not match grid {self.grid.shape}")


@dataclass
class CovarianceEstimate:
    """Hermitian, positive-definite (after loading) array covariance."""

    matrix: Array
    loading: float

    @property
    def n_channels(self) -> int:
        return self.matrix.shape[0]


def analytic_signal(samples: Array) -> Array:
    """Complex signal per channel whose magnitude is the envelope.

    The real part reproduces the input (Hilbert-transform construction).
    """
    x = np.asarray(samples, dtype=float)
    if x.shape[-1] < 4:
        raise ValueError("need at least 4 time samples")
    return scipy.signal.hilbert(x, axis=-1)


def estimate_covariance(snapshots: Array, loading_factor: float = 1e-2) -> CovarianceEstimate:
    """Sample covariance of snapshot columns plus relative diagonal loading.

    R = X X^H / K + delta I with delta = loading_factor * trace / M, floored
    at LOADING_FLOOR when the snapshots carry no energy. Raises
    SingularCovarianceError for zero snapshots without loading.
    """
    x = np.asarray(snapshots)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError("snapshots must be [channels, K] with K >= 1")
    if loading_factor < 0:
        raise ValueError("loading_factor must be >= 0")
    m, k = x.shape
    r = (x @ x.conj().T) / k
    r = 0.5 * (r + r.conj().T)
    tr = float(np.real(np.trace(r)))
    if loading_factor == 0.0:
        if tr == 0.0:
            raise SingularCovarianceError("all-zero snapshots with zero loading give a singular covariance")
        delta = 0.0
    else:
        delta = max(loading_factor * tr / m, LOADING_FLOOR)
    if delta:
        r = r + delta * np.eye(m)
    return CovarianceEstimate(matrix=r, loading=delta)


def mvdr_weights(cov: CovarianceEstimate | Array, steering: Array) -> Array:
    """Distortionless minimum-variance weights w = R^-1 a / (a^H R^-1 a)."""
    r = cov.matrix if isinstance(cov, CovarianceEstimate) else np.asarray(cov)
    a = np.asarray(steering, dtype=complex).reshape(-1)
    if not np.linalg.norm(a) > 0:
        raise ValueError("steering vector must be nonzero")
    eigs = np.linalg.eigvalsh(r)
    if eigs[0] <= 0 or eigs[-1] / eigs[0] > CONDITION_LIMIT:
        raise SingularCovarianceError(
            f"covariance condition {eigs[-1] / max(eigs[0], np.finfo(float).tiny):.3e} exceeds {CONDITION_LIMIT:.0e}")
    c, low = scipy.linalg.cho_factor(r, lower=True)
    ra = scipy.linalg.cho_solve((c, low), a)
    denom = np.real(a.conj() @ ra)
    return ra / denom


def _round_trip_delays(points: Array, array: ArrayGeometry) -> Array:
    """tx -> point -> element travel time, shape points.shape[:-1] + (M,)."""
    p = np.asarray(points, dtype=float)
    r_tx = np.linalg.norm(p - array.tx_position, axis=-1)
    r_rx = np.linalg.norm(p[..., None, :] - array.element_positions, axis=-1)
    return (r_tx[..., None] + r_rx) / array.sound_speed


def das_beamform(frame: RfFrame, array: ArrayGeometry, grid: SphericalGrid,
                 interpolate: bool = False) -> SphericalVolume:
    """Delay-and-sum: per bin, align channels on the round trip and sum.

    Nearest-sample delays by default (linear interpolation behind the
    flag); bins whose delayed sample falls outside the recorded window
    contribute zero.
    """
    if frame.n_channels != array.n_elements:
        raise ValueError(f"frame has {frame.n_channels} channels but array has {array.n_elements} elements")
    z = analytic_signal(frame.samples)
    fs = frame.sample_rate
    n_t = frame.n_samples
    r_c = grid.r_centers()
    th_c = grid.theta_centers()
    ph_c = grid.phi_centers()
    out = np.empty(grid.shape)
    ch = np.arange(array.n_elements)
    for i, phi in enumerate(ph_c):
        centers = spherical_to_cartesian(r_c[:, None], th_c[None, :], phi)  # [R, T, 3]
        tau = _round_trip_delays(centers, array)  # [R, T, M]
        if interpolate:
            pos = tau * fs
            i0 = np.floor(pos).astype(np.int64)
            frac = pos - i0
            ok0 = (i0 >= 0) & (i0 < n_t)
            ok1 = (i0 + 1 >= 0) & (i0 + 1 < n_t)
            v0 = np.where(ok0, z[ch[None, None, :], np.clip(i0, 0, n_t - 1)], 0.0)
            v1 = np.where(ok1, z[ch[None, None, :], np.clip(i0 + 1, 0, n_t - 1)], 0.0)
            vals = (1 - frac) * v0 + frac * v1
        else:
            idx = np.rint(tau * fs).astype(np.int64)
            ok = (idx >= 0) & (idx < n_t)
            vals = np.where(ok, z[ch[None, None, :], np.clip(idx, 0, n_t - 1)], 0.0)
        out[i] = np.abs(vals.sum(axis=-1))
    return SphericalVolume(values=out, grid=grid)


def _gate_sample_bounds(r_lo: float, r_hi: float, sound_speed: float, fs: float, n_t: int) -> tuple[int, int]:
    n0 = int(np.floor(2.0 * r_lo / sound_speed * fs))
    n1 = int(np.ceil(2.0 * r_hi / sound_speed * fs))
    return max(n0, 0), min(max(n1, 0), n_t)


def mvdr_beamform(frame: RfFrame, array: ArrayGeometry, grid: SphericalGrid,
                  loading_factor: float = 1e-2, snapshot_stride: int = 8,
                  weights_covariance: str = "sample") -> SphericalVolume:
    """Capon beamformer: per range gate, adaptive weights from gate snapshots.

    Snapshots are the analytic-signal columns inside the gate's round-trip
    interval, decimated by ``snapshot_stride``. The steering vector holds
    the carrier phase of the element delays relative to the array origin.
    Gates with singular covariance are zeroed and counted as warnings.
    ``weights_covariance="identity"`` freezes the weights to matched
    (DAS-like) weighting while still measuring the snapshot power, which
    is useful for regression against DAS.
    """
    if frame.n_channels != array.n_elements:
        raise ValueError(f"frame has {frame.n_channels} channels but array has {array.n_elements} elements")
    if weights_covariance not in ("sample", "identity"):
        raise ValueError("weights_covariance must be 'sample' or 'identity'")
    z = analytic_signal(frame.samples)
    fs = frame.sample_rate
    n_t = frame.n_samples
    m = array.n_elements
    f0 = array.carrier_freq
    r_c = grid.r_centers()
    th_c = grid.theta_centers()
    ph_c = grid.phi_centers()
    n_beams = grid.phi_bins * grid.theta_bins
    out = np.zeros(grid.shape)
    warnings = 0

    for k, rk in enumerate(r_c):
        n0, n1 = _gate_sample_bounds(rk - grid.r_step / 2, rk + grid.r_step / 2, array.sound_speed, fs, n_t)
        if n1 <= n0:
            warnings += n_beams
            continue
        snapshots = z[:, n0:n1:max(snapshot_stride, 1)]

        centers = spherical_to_cartesian(rk, th_c[None, :], ph_c[:, None])  # [phi, theta, 3]
        rel = (np.linalg.norm(centers[..., None, :] - array.element_positions, axis=-1)
               - np.linalg.norm(centers, axis=-1)[..., None]) / array.sound_speed
        steer = np.exp(-2j * np.pi * f0 * rel).reshape(n_beams, m).T  # [M, beams]

        if weights_covariance == "identity":
            sample_cov = (snapshots @ snapshots.conj().T) / snapshots.shape[1]
            w = steer / m  # w = a / (a^H a), |a_i| = 1
            power = np.real(np.einsum("mb,mn,nb->b", w.conj(), sample_cov, w))
        else:
            try:
                cov = estimate_covariance(snapshots, loading_factor)
                eigs = np.linalg.eigvalsh(cov.matrix)
                if eigs[0] <= 0 or eigs[-1] / eigs[0] > CONDITION_LIMIT:
                    raise SingularCovarianceError(f"range gate {k}: condition exceeds {CONDITION_LIMIT:.0e}")
                c, low = scipy.linalg.cho_factor(cov.matrix, lower=True)
            except SingularCovarianceError:
                warnings += n_beams
                continue
            ra = scipy.linalg.cho_solve((c, low), steer)
            denom = np.real(np.einsum("mb,mb->b", steer.conj(), ra))
            power = 1.0 / denom
        out[:, k, :] = np.maximum(power, 0.0).reshape(grid.phi_bins, grid.theta_bins)

    return SphericalVolume(values=out, grid=grid, warning_count=warnings)
