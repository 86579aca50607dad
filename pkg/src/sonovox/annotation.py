"""Rule-based ground-truth boxes from LiDAR-style point clouds.

Pipeline: ROI crop, RANSAC ground removal, ego removal, Euclidean
clustering, minimum-area-rectangle box fitting, and rule filtering on
box dimensions. All thresholds default to the annotation setup values
(ROI 0..12 m forward, ground distance 0.3 m, ego radius 2 m, cluster
threshold 0.7 m, L in [0.2, 8] m, W and H in [0.5, 3] m, L/W in
[0.5, 5], L/H >= 0.4).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .geometry import OrientedBox

Array = np.ndarray


@dataclass(frozen=True)
class RoiSpec:
    x_bounds: tuple[float, float] = (-12.0, 12.0)
    y_bounds: tuple[float, float] = (-2.0, 6.0)
    z_bounds: tuple[float, float] = (0.0, 12.0)

    def __post_init__(self):
        for lo, hi in (self.x_bounds, self.y_bounds, self.z_bounds):
            if not lo < hi:
                raise ValueError("ROI bounds must satisfy min < max")


@dataclass(frozen=True)
class FilterRules:
    l_bounds: tuple[float, float] = (0.2, 8.0)
    w_bounds: tuple[float, float] = (0.5, 3.0)
    h_bounds: tuple[float, float] = (0.5, 3.0)
    lw_ratio_bounds: tuple[float, float] = (0.5, 5.0)
    lh_ratio_min: float = 0.4


@dataclass
class GroundRemovalResult:
    points: Array
    plane: tuple[Array, float] | None  # (unit normal, offset d): n.p + d = 0
    removed: int

    @property
    def found_plane(self) -> bool:
        return self.plane is not None


def crop_roi(cloud: Array, roi: RoiSpec | None = None) -> Array:
    """Keep points inside the ROI; bounds are inclusive."""
    if roi is None:
        roi = RoiSpec()
    p = np.asarray(cloud, dtype=float).reshape(-1, 3)
    keep = np.ones(len(p), dtype=bool)
    for axis, (lo, hi) in enumerate((roi.x_bounds, roi.y_bounds, roi.z_bounds)):
        keep &= (p[:, axis] >= lo) & (p[:, axis] <= hi)
    return p[keep]


def remove_ground(cloud: Array, distance: float = 0.3, seed: int = 0, iterations: int = 200,
                  min_inlier_fraction: float = 0.2, max_tilt_deg: float = 30.0) -> GroundRemovalResult:
    """RANSAC dominant-plane removal.

    Fits a plane whose normal lies within ``max_tilt_deg`` of +y and drops
    points within ``distance`` of it. If no candidate reaches the inlier
    fraction (or the cloud is too small to fit), the cloud comes back
    unchanged with no plane.
    """
    p = np.asarray(cloud, dtype=float).reshape(-1, 3)
    n_pts = len(p)
    if n_pts < 3:
        return GroundRemovalResult(points=p, plane=None, removed=0)

    rng = np.random.default_rng(seed)
    cos_limit = np.cos(np.deg2rad(max_tilt_deg))
    best_count = 0
    best_plane = None
    for _ in range(iterations):
        idx = rng.choice(n_pts, size=3, replace=False)
        a, b, c = p[idx]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        if normal[1] < 0:
            normal = -normal
        if normal[1] < cos_limit:
            continue
        d = -normal @ a
        count = int(np.count_nonzero(np.abs(p @ normal + d) <= distance))
        if count > best_count:
            best_count = count
            best_plane = (normal, d)

    if best_plane is None or best_count < min_inlier_fraction * n_pts:
        return GroundRemovalResult(points=p, plane=None, removed=0)
    normal, d = best_plane
    keep = np.abs(p @ normal + d) > distance
    return GroundRemovalResult(points=p[keep], plane=(normal, float(d)), removed=int(n_pts - keep.sum()))


def remove_ego(cloud: Array, radius: float = 2.0) -> Array:
    """Drop points whose horizontal distance sqrt(x^2 + z^2) is below the radius."""
    p = np.asarray(cloud, dtype=float).reshape(-1, 3)
    return p[np.hypot(p[:, 0], p[:, 2]) >= radius]


def euclidean_cluster(cloud: Array, threshold: float = 0.7, min_points: int = 5) -> list[Array]:
    """Connected components of the <=threshold proximity graph.

    Returns index arrays into the input cloud, each sorted, ordered by
    first point index; components smaller than ``min_points`` are dropped.
    """
    p = np.asarray(cloud, dtype=float).reshape(-1, 3)
    n = len(p)
    if n == 0:
        return []
    parent = np.arange(n)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    tree = cKDTree(p)
    for i, j in tree.query_pairs(threshold):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    clusters = [np.asarray(members, dtype=np.int64) for _, members in sorted(groups.items())]
    return [c for c in clusters if len(c) >= min_points]


def _min_area_rect(xz: Array) -> tuple[float, float, float, Array]:
    """Minimum-area enclosing rectangle of 2D points via hull edge directions.

    Returns (yaw, length, width, center) with length >= width; yaw is the
    world-frame orientation of the length axis, normalized to (-pi/2, pi/2].
    """
    pts = xz
    try:
        hull = ConvexHull(pts)
        hull_pts = pts[hull.vertices]
    except QhullError:
        hull_pts = None

    if hull_pts is None or len(hull_pts) < 3:
        # degenerate (collinear or tiny) cluster: orient along the principal axis
        centered = pts - pts.mean(axis=0)
        cov = centered.T @ centered
        _, vecs = np.linalg.eigh(cov)
        direction = vecs[:, -1]
        angles = [np.arctan2(direction[0], direction[1])]
        hull_pts = pts
    else:
        edges = np.diff(np.vstack([hull_pts, hull_pts[:1]]), axis=0)
        # box-frame length axis at yaw psi points along (sin == x, cos == z)
        angles = list(np.arctan2(edges[:, 0], edges[:, 1]))

    best = None
    for ang in angles:
        c, s = np.cos(ang), np.sin(ang)
        u = s * hull_pts[:, 0] + c * hull_pts[:, 1]   # along edge direction
        v = c * hull_pts[:, 0] - s * hull_pts[:, 1]   # perpendicular
        du, dv = u.max() - u.min(), v.max() - v.min()
        area = du * dv
        if best is None or area < best[0]:
            best = (area, ang, u.min(), u.max(), v.min(), v.max())

    _, ang, u0, u1, v0, v1 = best
    cu, cv = (u0 + u1) / 2, (v0 + v1) / 2
    c, s = np.cos(ang), np.sin(ang)
    center = np.array([s * cu + c * cv, c * cu - s * cv])
    du, dv = u1 - u0, v1 - v0
    # the box length axis at yaw psi points along (cos psi, -sin psi) in (x, z)
    if du >= dv:
        length, width = du, dv
        yaw = _wrap_half_pi(ang - np.pi / 2)
    else:
        length, width = dv, du
        yaw = _wrap_half_pi(ang)
    return yaw, length, width, center


def _wrap_half_pi(angle: float) -> float:
    """Wrap to (-pi/2, pi/2]; box yaw is only defined modulo pi."""
    a = (angle + np.pi / 2) % np.pi - np.pi / 2
    return np.pi / 2 if a == -np.pi / 2 else a


def fit_oriented_box(points: Array, min_extent: float = 0.01) -> OrientedBox:
    """Tight oriented box: yaw from the min-area rectangle of the (x, z) footprint.

    Height and vertical center come from the y extent; degenerate extents
    are floored at ``min_extent``.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("cannot fit a box to an empty cluster")
    yaw, length, width, center_xz = _min_area_rect(p[:, [0, 2]])
    y_lo, y_hi = p[:, 1].min(), p[:, 1].max()
    return OrientedBox(
        cx=float(center_xz[0]),
        cy=float((y_lo + y_hi) / 2),
        cz=float(center_xz[1]),
        l=float(max(length, min_extent)),
        w=float(max(width, min_extent)),
        h=float(max(y_hi - y_lo, min_extent)),
        yaw=float(yaw),
    )


def rule_filter(boxes: list[OrientedBox], rules: FilterRules | None = None) -> list[OrientedBox]:
    """Keep boxes whose dimensions and aspect ratios pass all bounds (inclusive)."""
    if rules is None:
        rules = FilterRules()
    kept = []
    for b in boxes:
        ok = (rules.l_bounds[0] <= b.l <= rules.l_bounds[1]
              and rules.w_bounds[0] <= b.w <= rules.w_bounds[1]
              and rules.h_bounds[0] <= b.h <= rules.h_bounds[1]
              and rules.lw_ratio_bounds[0] <= b.l / b.w <= rules.lw_ratio_bounds[1]
              and b.l / b.h >= rules.lh_ratio_min)
        if ok:
            kept.append(b)
    return kept


@dataclass(frozen=True)
class AnnotationParams:
    roi: RoiSpec = field(default_factory=RoiSpec)
    rules: FilterRules = field(default_factory=FilterRules)
    ground_distance: float = 0.3
    ego_radius: float = 2.0
    cluster_threshold: float = 0.7
    min_cluster_points: int = 5
    ransac_iterations: int = 200
    seed: int = 0


def annotate_frame(cloud: Array, params: AnnotationParams | None = None) -> list[OrientedBox]:
    """Full annotation chain from raw cloud to rule-filtered oriented boxes."""
    if params is None:
        params = AnnotationParams()
    p = crop_roi(cloud, params.roi)
    p = remove_ground(p, distance=params.ground_distance, seed=params.seed,
                      iterations=params.ransac_iterations).points
    p = remove_ego(p, radius=params.ego_radius)
    clusters = euclidean_cluster(p, threshold=params.cluster_threshold,
                                 min_points=params.min_cluster_points)
    boxes = [fit_oriented_box(p[idx]) for idx in clusters]
    return rule_filter(boxes, params.rules)
