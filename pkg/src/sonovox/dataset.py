"""Frame datasets: mask projection, filtering, splits and on-disk formats.

The CVOL container is a 64-byte little-endian header followed by a
row-major payload:

    offset  field
    0       magic "CVOL"
    4       u16 version (1)
    6       u8 dtype (0 = f32, 1 = u8)
    7       u8 reserved (0)
    8       3 x u16 dims (H, D, W)
    14      6 x f64 grid bounds
    62      zero padding to 64

Cartesian volumes and masks store bounds (x_lo, x_hi, y_lo, y_hi, z_lo,
z_hi) in meters. Spherical volumes store (r_min, r_max, theta_lo,
theta_hi, phi_lo, phi_hi) with angles in degrees and dims [phi, r,
theta]. RF frames store dims [channels, time, 1] with bounds
(sample_rate, ping_time, 0, 0, 0, 0). The payload kind is the caller's
to name (directory layout and manifests carry it); masks are
distinguishable by dtype.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .beamforming import SphericalVolume
from .geometry import OrientedBox, RigidTransform, SphericalGrid, VoxelGrid, point_in_box
from .scene import RfFrame
from .volume import Volume

Array = np.ndarray

_HEADER = struct.Struct("<4sHBB3H6d")
_HEADER_SIZE = 64
_MAGIC = b"CVOL"
_VERSION = 1
_DTYPE_F32 = 0
_DTYPE_U8 = 1
_MAX_DIM = 0xFFFF


class CvolError(Exception):
    """Base error for CVOL files."""


class BadMagicError(CvolError):
    pass


class VersionMismatchError(CvolError):
    pass


class TruncatedFileError(CvolError):
    pass


class DimsOverflowError(CvolError):
    pass


@dataclass
class OccupancyMask:
    """Voxelwise class labels, 0 = background, 1 = object."""

    labels: Array
    grid: VoxelGrid

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.shape != self.grid.shape:
            raise ValueError(f"labels shape {self.labels.shape} does not match grid dims {self.grid.shape}")
        if self.labels.max(initial=0) > 1:
            raise ValueError("labels must be 0 or 1")

    @property
    def object_voxels(self) -> int:
        return int(self.labels.sum())


@dataclass
class Frame:
    id: str
    intensity: Volume
    mask: OccupancyMask

    def __post_init__(self):
        if self.intensity.grid != self.mask.grid:
            raise ValueError(f"frame {self.id}: intensity and mask grids differ")


@dataclass
class DatasetSplit:
    train: list[Frame]
    val: list[Frame]
    seed: int


def boxes_to_mask(boxes: list[OrientedBox], grid: VoxelGrid,
                  lidar_to_grid: RigidTransform | None = None) -> OccupancyMask:
    """Label a voxel 1 iff its center, mapped into the annotation frame, is in a box."""
    centers = grid.voxel_centers().reshape(-1, 3)
    if lidar_to_grid is not None:
        centers = lidar_to_grid.inverse().apply(centers)
    hit = np.zeros(len(centers), dtype=bool)
    for box in boxes:
        hit |= point_in_box(centers, box)
    return OccupancyMask(labels=hit.reshape(grid.shape).astype(np.uint8), grid=grid)


def filter_empty(frames: list[Frame]) -> list[Frame]:
    """Drop frames whose mask has no object voxels."""
    return [f for f in frames if f.mask.object_voxels > 0]


def split(frames: list[Frame], train_fraction: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then train takes floor(fraction * N) frames."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(frames))
    n_train = math.floor(train_fraction * len(frames))
    train = [frames[i] for i in order[:n_train]]
    val = [frames[i] for i in order[n_train:]]
    return DatasetSplit(train=train, val=val, seed=seed)


def _write_cvol(path, values: Array, dtype_code: int, bounds: tuple[float, ...]) -> None:
    if values.ndim != 3:
        raise ValueError("CVOL payload must be 3-dimensional")
    if any(d > _MAX_DIM for d in values.shape):
        raise DimsOverflowError(f"dims {values.shape} exceed the u16 limit {_MAX_DIM}")
    header = _HEADER.pack(_MAGIC, _VERSION, dtype_code, 0, *values.shape, *bounds)
    header += b"\0" * (_HEADER_SIZE - len(header))
    np_dtype = "<f4" if dtype_code == _DTYPE_F32 else "u1"
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(values, dtype=np_dtype).tobytes())


def _read_cvol(path) -> tuple[Array, int, tuple[float, ...]]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_SIZE:
        raise TruncatedFileError(f"{path}: file shorter than the {_HEADER_SIZE}-byte header")
    magic, version, dtype_code, _, h, d, w, *bounds = _HEADER.unpack(raw[:_HEADER.size])
    if magic != _MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}")
    if dtype_code not in (_DTYPE_F32, _DTYPE_U8):
        raise CvolError(f"{path}: unknown dtype code {dtype_code}")
    np_dtype = np.dtype("<f4") if dtype_code == _DTYPE_F32 else np.dtype("u1")
    expect = h * d * w * np_dtype.itemsize
    payload = raw[_HEADER_SIZE:]
    if len(payload) < expect:
        raise TruncatedFileError(f"{path}: payload {len(payload)} bytes, expected {expect}")
    values = np.frombuffer(payload[:expect], dtype=np_dtype).reshape(h, d, w)
    return values, dtype_code, tuple(bounds)


def _voxel_bounds(grid: VoxelGrid) -> tuple[float, ...]:
    return (*grid.x_bounds, *grid.y_bounds, *grid.z_bounds)


def write_volume(path, obj: Volume | OccupancyMask | RfFrame | SphericalVolume) -> None:
    """Serialize any pipeline payload into a CVOL file (see module docstring)."""
    if isinstance(obj, Volume):
        _write_cvol(path, obj.values, _DTYPE_F32, _voxel_bounds(obj.grid))
    elif isinstance(obj, OccupancyMask):
        _write_cvol(path, obj.labels, _DTYPE_U8, _voxel_bounds(obj.grid))
    elif isinstance(obj, RfFrame):
        _write_cvol(path, obj.samples[:, :, None], _DTYPE_F32,
                    (obj.sample_rate, obj.ping_time, 0.0, 0.0, 0.0, 0.0))
    elif isinstance(obj, SphericalVolume):
        g = obj.grid
        bounds = (g.r_min, g.r_max,
                  np.rad2deg(g.theta_bounds[0]), np.rad2deg(g.theta_bounds[1]),
                  np.rad2deg(g.phi_bounds[0]), np.rad2deg(g.phi_bounds[1]))
        _write_cvol(path, obj.values, _DTYPE_F32, bounds)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def read_volume(path, kind: str = "auto") -> Volume | OccupancyMask | RfFrame | SphericalVolume:
    """Read a CVOL file back; ``kind`` in auto|volume|mask|rf|spherical.

    "auto" resolves masks by dtype and everything else to a Cartesian
    volume; RF and spherical payloads must be named since the header does
    not distinguish them.
    """
    values, dtype_code, bounds = _read_cvol(path)
    if kind == "auto":
        kind = "mask" if dtype_code == _DTYPE_U8 else "volume"
    if kind == "mask":
        grid = _grid_from_bounds(bounds, values.shape)
        return OccupancyMask(labels=values, grid=grid)
    if kind == "volume":
        grid = _grid_from_bounds(bounds, values.shape)
        return Volume(values=values.astype(np.float32), grid=grid)
    if kind == "rf":
        if values.shape[2] != 1:
            raise CvolError(f"{path}: RF payload must have trailing dim 1")
        return RfFrame(samples=values[:, :, 0].astype(np.float32), sample_rate=bounds[0], ping_time=bounds[1])
    if kind == "spherical":
        phi_bins, r_bins, theta_bins = values.shape
        grid = SphericalGrid(
            r_min=bounds[0], r_max=bounds[1], r_step=(bounds[1] - bounds[0]) / r_bins,
            theta_bounds=(np.deg2rad(bounds[2]), np.deg2rad(bounds[3])), theta_bins=theta_bins,
            phi_bounds=(np.deg2rad(bounds[4]), np.deg2rad(bounds[5])), phi_bins=phi_bins)
        return SphericalVolume(values=values.astype(np.float32), grid=grid)
    raise ValueError(f"unknown kind {kind!r}")


def _grid_from_bounds(bounds: tuple[float, ...], shape: tuple[int, int, int]) -> VoxelGrid:
    return VoxelGrid(x_bounds=(bounds[0], bounds[1]), y_bounds=(bounds[2], bounds[3]),
                     z_bounds=(bounds[4], bounds[5]), dims=shape)


def write_point_cloud(path, cloud: Array) -> None:
    """UTF-8 CSV "x,y,z" in meters at 6 decimals."""
    p = np.asarray(cloud, dtype=float).reshape(-1, 3)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("x,y,z\n")
        for x, y, z in p:
            f.write(f"{x:.6f},{y:.6f},{z:.6f}\n")


def read_point_cloud(path) -> Array:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is not None and header[:3] != ["x", "y", "z"]:
            rows.append([float(v) for v in header[:3]])
        for row in reader:
            if row:
                rows.append([float(v) for v in row[:3]])
    return np.asarray(rows, dtype=float).reshape(-1, 3)


def write_boxes_csv(path, boxes_by_frame: dict[str, list[OrientedBox]]) -> None:
    """UTF-8 CSV: frame_id,cx,cy,cz,l,w,h,yaw_deg,class."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("frame_id,cx,cy,cz,l,w,h,yaw_deg,class\n")
        for frame_id in boxes_by_frame:
            for b in boxes_by_frame[frame_id]:
                f.write(f"{frame_id},{b.cx:.6f},{b.cy:.6f},{b.cz:.6f},"
                        f"{b.l:.6f},{b.w:.6f},{b.h:.6f},{np.rad2deg(b.yaw):.6f},{b.label}\n")


def read_boxes_csv(path) -> dict[str, list[OrientedBox]]:
    out: dict[str, list[OrientedBox]] = {}
    with open(path, "r", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for row in reader:
            box = OrientedBox(
                cx=float(row["cx"]), cy=float(row["cy"]), cz=float(row["cz"]),
                l=float(row["l"]), w=float(row["w"]), h=float(row["h"]),
                yaw=float(np.deg2rad(float(row["yaw_deg"]))), label=row["class"])
            out.setdefault(row["frame_id"], []).append(box)
    return out


def write_manifest(path, entries: list[tuple[str, str, str]]) -> None:
    """Dataset manifest: UTF-8 lines "frame_id,intensity_path,mask_path"."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        for frame_id, ipath, mpath in entries:
            f.write(f"{frame_id},{ipath},{mpath}\n")


def read_manifest(path) -> list[tuple[str, str, str]]:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                frame_id, ipath, mpath = line.split(",")
                entries.append((frame_id, ipath, mpath))
    return entries


def load_frames(manifest_path) -> list[Frame]:
    """Materialize frames from a manifest; paths resolve relative to it."""
    base = Path(manifest_path).parent
    frames = []
    for frame_id, ipath, mpath in read_manifest(manifest_path):
        intensity = read_volume(base / ipath, kind="volume")
        mask = read_volume(base / mpath, kind="mask")
        frames.append(Frame(id=frame_id, intensity=intensity, mask=mask))
    return frames
