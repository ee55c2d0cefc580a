"""Camera models, quaternion pose algebra and pinhole (un)projection.

Conventions used throughout the package:
  * pixel (i, j): i runs along the width (x) axis, j along the height (y) axis;
    grids are stored row-major as ``[j, i]``.
  * Pose is a world-to-camera rigid transform stored as a unit quaternion
    (w, x, y, z) plus a translation; ``x_cam = R x_world + t``.
  * A camera additionally carries a positive scale ``sigma``; projection acts
    on the scaled point: pixel = K (R (sigma x) + t) followed by the
    homogeneous division.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CycleDetected, MissingNode, NonPositiveDepth

EPS_Z = 1e-9  # depth guard for projections


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Unit quaternion (w >= 0) of a rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def random_quat(rng):
    return quat_normalize(rng.normal(size=4))


def rotation_angle(Ra, Rb=None):
    """Geodesic angle (radians) between two rotations (Rb defaults to identity)."""
    R = Ra if Rb is None else Ra @ Rb.T
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(c))


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform; quaternion renormalized on construction."""

    quat: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quat", quat_normalize(self.quat))
        t = np.asarray(self.trans, dtype=float)
        if t.shape != (3,):
            raise ValueError("translation must be a 3-vector")
        object.__setattr__(self, "trans", t)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @property
    def rotation(self):
        return quat_to_matrix(self.quat)

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self o other)(x) = self(other(x))."""
        R = self.rotation
        return Pose(quat_mul(self.quat, other.quat), R @ other.trans + self.trans)

    def inverse(self) -> "Pose":
        R = self.rotation
        qinv = np.array([self.quat[0], -self.quat[1], -self.quat[2], -self.quat[3]])
        return Pose(qinv, -R.T @ self.trans)

    def apply(self, pts):
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation.T + self.trans

    def as_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.trans
        return M

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.trans


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics with the principal point pinned to the image center."""

    focal: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")

    @property
    def principal_point(self):
        return (self.width / 2.0, self.height / 2.0)

    def matrix(self):
        cx, cy = self.principal_point
        return np.array([[self.focal, 0.0, cx], [0.0, self.focal, cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraParams:
    """Intrinsics plus a scaled world-to-camera pose.

    ``pose`` is interpreted per the active parametrization (absolute, or
    relative to ``parent`` on a kinematic tree, with an optional rotation
    center shift; see reparametrized_pose / compose_world_pose).
    """

    intrinsics: Intrinsics
    pose: Pose
    sigma: float = 1.0
    parent: int | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class PointMap:
    """H x W grid of 3D points expressed in camera ``frame``, with confidence."""

    frame: int
    points: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        conf = np.asarray(self.confidence, dtype=float)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ValueError("points must be (H, W, 3)")
        if pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError("pointmap must contain at least one pixel")
        if conf.shape != pts.shape[:2]:
            raise ValueError("confidence grid must match the point grid")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        if not np.all(np.isfinite(conf)) or np.any(conf < 0):
            raise ValueError("confidence must be finite and non-negative")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "confidence", conf)

    @property
    def height(self):
        return self.points.shape[0]

    @property
    def width(self):
        return self.points.shape[1]

    @property
    def depth(self):
        return self.points[:, :, 2]


def reproject(cam: CameraParams, x):
    """Project a world point to pixel coordinates: K (R sigma x + t) with division."""
    x = np.asarray(x, dtype=float)
    v = cam.pose.rotation @ (cam.sigma * x) + cam.pose.trans
    if v[2] <= EPS_Z:
        raise NonPositiveDepth(f"point has non-positive camera depth {v[2]!r}")
    cx, cy = cam.intrinsics.principal_point
    f = cam.intrinsics.focal
    return np.array([f * v[0] / v[2] + cx, f * v[1] / v[2] + cy])


def inverse_reproject(cam: CameraParams, pixel, depth):
    """World point of a pixel at a given scaled-camera-frame depth.

    Exact inverse of :func:`reproject` for the same camera; sigma enters as
    1/sigma after the rigid inverse.
    """
    if depth <= 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth!r}")
    i, j = pixel
    cx, cy = cam.intrinsics.principal_point
    f = cam.intrinsics.focal
    ray = np.array([(i - cx) / f, (j - cy) / f, 1.0]) * depth
    R = cam.pose.rotation
    return (R.T @ (ray - cam.pose.trans)) / cam.sigma


def reparametrized_pose(raw: Pose, median_canonical_depth, focal, canonical_focal) -> Pose:
    """Compose the fixed z post-translation with a free pose.

    The post-translation magnitude is median_canonical_depth * focal /
    canonical_focal, recomputed from the current focal at every evaluation;
    it moves the effective rotation pivot from the optical center to the
    median-depth point on the optical axis.
    """
    if median_canonical_depth <= 0:
        raise ValueError("median canonical depth must be positive")
    if focal <= 0 or canonical_focal <= 0:
        raise ValueError("focals must be positive")
    m = median_canonical_depth * focal / canonical_focal
    return Pose(raw.quat, raw.trans + np.array([0.0, 0.0, m]))


def compose_world_pose(tree, cam_id, post_translations=None) -> Pose:
    """World-to-camera pose of a node: product of relative poses from the root.

    ``tree`` must expose ``root`` and ``parents`` (child -> (parent, Pose, ...))
    plus ``node_pose(id)`` for the root's own stored pose.  When
    ``post_translations`` maps node ids to z-shifts, each node's relative pose
    is first composed with its post-translation (rotation-center mode).
    """
    chain = []
    node = cam_id
    seen = set()
    while True:
        if node in seen:
            raise CycleDetected(f"cycle through node {node}")
        seen.add(node)
        chain.append(node)
        if node == tree.root:
            break
        if node not in tree.parents:
            raise MissingNode(f"node {node} is not covered by the tree")
        node = tree.parents[node][0]
    total = None
    for node in reversed(chain):
        rel = tree.node_pose(node)
        if post_translations is not None and node in post_translations:
            m = post_translations[node]
            rel = Pose(rel.quat, rel.trans + np.array([0.0, 0.0, m]))
        total = rel if total is None else rel.compose(total)
    return total
