"""Deterministic synthetic world: RF waveform synthesis and LiDAR-style clouds.

Every generator is a pure function of (scene, parameters); randomness comes
only from the scene seed, so repeated calls are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import OrientedBox, point_in_box

Array = np.ndarray


def planar_array_positions(n_az: int = 8, n_el: int = 4, spacing: float | None = None,
                           carrier_freq: float = 40_000.0, sound_speed: float = 343.0) -> Array:
    """Receiver element positions on a centered planar grid in the sensor xy-plane.

    Default spacing is half the carrier wavelength.
    """
    if spacing is None:
        spacing = 0.5 * sound_speed / carrier_freq
    ax = (np.arange(n_az) - (n_az - 1) / 2) * spacing
    el = (np.arange(n_el) - (n_el - 1) / 2) * spacing
    xx, yy = np.meshgrid(ax, el, indexing="xy")
    pos = np.stack([xx.ravel(), yy.ravel(), np.zeros(n_az * n_el)], axis=-1)
    return pos


@dataclass(frozen=True)
class ArrayGeometry:
    """Receive array plus transmit element, in the sensor frame (boresight +z)."""

    element_positions: Array = field(default_factory=planar_array_positions)
    carrier_freq: float = 40_000.0
    sample_rate: float = 240_000.0
    sound_speed: float = 343.0
    tx_position: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "element_positions", np.asarray(self.element_positions, dtype=float))
        object.__setattr__(self, "tx_position", np.asarray(self.tx_position, dtype=float).reshape(3))
        if self.element_positions.ndim != 2 or self.element_positions.shape[0] < 2:
            raise ValueError("array needs at least 2 elements")
        if not self.sample_rate > 2 * self.carrier_freq:
            raise ValueError("sample_rate must exceed twice the carrier frequency")

    @property
    def n_elements(self) -> int:
        return self.element_positions.shape[0]


@dataclass
class Scene:
    """Scatterers for the acoustic path plus boxes/ground for the LiDAR path."""

    scatterer_xyz: Array = field(default_factory=lambda: np.zeros((0, 3)))
    reflectivity: Array = field(default_factory=lambda: np.zeros(0))
    boxes: list[OrientedBox] = field(default_factory=list)
    ground_height: float = -1.8
    seed: int = 0

    def __post_init__(self):
        self.scatterer_xyz = np.asarray(self.scatterer_xyz, dtype=float).reshape(-1, 3)
        self.reflectivity = np.asarray(self.reflectivity, dtype=float).reshape(-1)
        if self.scatterer_xyz.shape[0] != self.reflectivity.shape[0]:
            raise ValueError("scatterer_xyz and reflectivity lengths differ")
        if np.any(self.reflectivity < 0):
            raise ValueError("reflectivity must be non-negative")


@dataclass
class RfFrame:
    """Raw receiver waveforms for one ping: samples[channel, time]."""

    samples: Array
    sample_rate: float
    ping_time: float = 0.0
    excluded_scatterers: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2:
            raise ValueError("samples must be [channels, time]")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


def synthesize_rx_waveforms(scene: Scene, array: ArrayGeometry, pulse_cycles: int = 8,
                            noise_std: float = 0.0, record_range: float = 13.0) -> RfFrame:
    """Simulate one ping: each scatterer returns a tone burst per channel.

    A scatterer at p contributes, on channel m, a rectangular-windowed
    sinusoid at the carrier arriving at (|p - tx| + |p - rx_m|) / c with
    amplitude reflectivity / (|p - tx| * |p - rx_m|). Scatterers behind
    the array plane (z <= 0) are excluded and counted in the result.
    Gaussian noise of the given std is added last; the scene seed makes
    the output deterministic.
    """
    if pulse_cycles < 1:
        raise ValueError("pulse_cycles must be >= 1")
    fs, f0, c = array.sample_rate, array.carrier_freq, array.sound_speed
    burst_len = pulse_cycles / f0
    duration = 2.0 * record_range / c + burst_len
    n_samples = int(np.ceil(duration * fs))
    t = np.arange(n_samples) / fs
    m = array.n_elements
    samples = np.zeros((m, n_samples))

    excluded = 0
    for p, refl in zip(scene.scatterer_xyz, scene.reflectivity):
        if p[2] <= 0:
            excluded += 1
            continue
        r_tx = np.linalg.norm(p - array.tx_position)
        r_rx = np.linalg.norm(p - array.element_positions, axis=1)  # (M,)
        tau = (r_tx + r_rx) / c
        amp = refl / (r_tx * r_rx)
        rel = t[None, :] - tau[:, None]
        window = (rel >= 0.0) & (rel < burst_len)
        samples += np.where(window, amp[:, None] * np.sin(2 * np.pi * f0 * rel), 0.0)

    if noise_std > 0:
        rng = np.random.default_rng(scene.seed)
        samples = samples + rng.normal(0.0, noise_std, samples.shape)
    return RfFrame(samples=samples, sample_rate=fs, excluded_scatterers=excluded)


def synthesize_lidar_cloud(scene: Scene, points_per_box: int = 400, ground_points: int = 600,
                           jitter: float = 0.02, ground_extent: tuple[float, float, float, float] = (-12.0, 12.0, 0.0, 12.0)) -> Array:
    """Sample box surfaces and the ground plane with seeded per-axis jitter.

    Jitter is uniform in [-jitter, jitter] per axis, so box points stay
    inside the box inflated by ``jitter`` and ground points stay within
    ``jitter`` of the ground height. Returns an (N, 3) cloud.
    """
    if points_per_box < 0 or ground_points < 0:
        raise ValueError("point counts must be non-negative")
    rng = np.random.default_rng(scene.seed)
    chunks = []
    for box in scene.boxes:
        if points_per_box:
            chunks.append(_sample_box_surface(box, points_per_box, rng))
    if ground_points:
        x_lo, x_hi, z_lo, z_hi = ground_extent
        g = np.empty((ground_points, 3))
        g[:, 0] = rng.uniform(x_lo, x_hi, ground_points)
        g[:, 1] = scene.ground_height
        g[:, 2] = rng.uniform(z_lo, z_hi, ground_points)
        chunks.append(g)
    if not chunks:
        return np.zeros((0, 3))
    cloud = np.concatenate(chunks, axis=0)
    cloud += rng.uniform(-jitter, jitter, cloud.shape)
    return cloud


def _sample_box_surface(box: OrientedBox, n: int, rng: np.random.Generator) -> Array:
    """Uniform surface samples, faces weighted by area, in world coordinates."""
    ex, ey, ez = box.l, box.h, box.w  # local x, y, z extents
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey], dtype=float)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, n)
    v = rng.uniform(-0.5, 0.5, n)
    local = np.empty((n, 3))
    for i, f in enumerate(face):
        axis = f // 2  # 0: +-x faces, 1: +-y faces, 2: +-z faces
        sign = 1.0 if f % 2 == 0 else -1.0
        coords = np.empty(3)
        coords[axis] = 0.5 * sign
        other = [a for a in range(3) if a != axis]
        coords[other[0]] = u[i]
        coords[other[1]] = v[i]
        local[i] = coords * np.array([ex, ey, ez])
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] + s * local[:, 2]
    world[:, 1] = local[:, 1]
    world[:, 2] = -s * local[:, 0] + c * local[:, 2]
    return world + box.center


def make_road_scene(seed: int, n_boxes: int = 2, ground_height: float = -1.8,
                    scatterers_per_box: int = 12, ground_scatterers: int = 0,
                    x_span: tuple[float, float] = (-6.0, 6.0),
                    z_span: tuple[float, float] = (3.0, 10.0)) -> Scene:
    """Vehicle-sized boxes resting on the ground plus scatterers on their surfaces.

    The acoustic scatterers are placed on box faces visible from the
    origin-ish sensor bar (front, rear and side faces), so the beamformed
    intensity concentrates where the occupancy mask will be.
    """
    rng = np.random.default_rng(seed)
    boxes = []
    scat = []
    refl = []
    for _ in range(n_boxes):
        l = rng.uniform(3.2, 4.8)
        w = rng.uniform(1.5, 2.0)
        h = rng.uniform(1.2, 1.8)
        yaw = rng.uniform(-np.pi / 2, np.pi / 2)
        cx = rng.uniform(*x_span)
        cz = rng.uniform(*z_span)
        box = OrientedBox(cx, ground_height + h / 2 + 0.05, cz, l, w, h, yaw)
        boxes.append(box)
        pts = _sample_box_surface(box, scatterers_per_box, rng)
        scat.append(pts)
        refl.append(rng.uniform(0.5, 1.5, scatterers_per_box))
    if ground_scatterers:
        g = np.empty((ground_scatterers, 3))
        g[:, 0] = rng.uniform(-8, 8, ground_scatterers)
        g[:, 1] = ground_height
        g[:, 2] = rng.uniform(1, 11, ground_scatterers)
        scat.append(g)
        refl.append(rng.uniform(0.05, 0.15, ground_scatterers))
    xyz = np.concatenate(scat, axis=0) if scat else np.zeros((0, 3))
    r = np.concatenate(refl, axis=0) if refl else np.zeros(0)
    return Scene(scatterer_xyz=xyz, reflectivity=r, boxes=boxes, ground_height=ground_height, seed=seed)
