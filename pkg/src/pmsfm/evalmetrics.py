"""Trajectory evaluation: similarity-aligned translation error, pairwise
relative rotation/translation accuracies, their area-under-curve summary, and
the registration rate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration
from .geometry import Pose, matrix_to_quat, rotation_angle

ZERO_TRANSLATION_REL = 1e-9   # relative threshold for "no translation"


@dataclass
class Trajectory:
    """Ordered camera poses; None marks an unregistered camera."""

    poses: dict   # id -> Pose | None

    @classmethod
    def from_pairs(cls, pairs):
        poses = {}
        for cam_id, pose in pairs:
            if cam_id in poses:
                raise ValueError(f"duplicate camera id {cam_id}")
            poses[cam_id] = pose
        return cls(poses=poses)

    def registered_ids(self):
        return sorted(i for i, p in self.poses.items() if p is not None)

    def __len__(self):
        return len(self.poses)


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    quat: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def rotation(self):
        from .geometry import quat_to_matrix
        return quat_to_matrix(self.quat)

    def apply(self, pts):
        return self.scale * (np.asarray(pts, float) @ self.rotation.T) + self.trans


def umeyama(src, dst, weights=None, allow_reflection=False):
    """Weighted least-squares similarity transform dst ~= s R src + t.

    Reflections are corrected by the determinant sign unless explicitly
    allowed.  Returns (s, R, t).
    """
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, float)
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateConfiguration("weights sum to zero")
    mu_s = (w[:, None] * src).sum(axis=0) / wsum
    mu_d = (w[:, None] * dst).sum(axis=0) / wsum
    xs = src - mu_s
    xd = dst - mu_d
    cov = (w[:, None] * xd).T @ xs / wsum
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if not allow_reflection and np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var = (w * (xs * xs).sum(axis=1)).sum() / wsum
    if var <= 0:
        raise DegenerateConfiguration("source points are coincident")
    s = float(np.trace(np.diag(S) @ D) / var)
    t = mu_d - s * R @ mu_s
    return s, R, t


def procrustes_align(est_centers, gt_centers) -> SimilarityTransform:
    """Closed-form similarity transform minimizing sum ||s R p + t - q||^2."""
    est = np.asarray(est_centers, float)
    gt = np.asarray(gt_centers, float)
    if len(est) < 3 or len(gt) != len(est):
        raise DegenerateConfiguration("need at least 3 point pairs")
    centered = est - est.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[0] <= 0 or svals[1] <= 1e-12 * svals[0]:
        raise DegenerateConfiguration("points are collinear or coincident")
    s, R, t = umeyama(est, gt)
    if s <= 0:
        raise DegenerateConfiguration("degenerate scale")
    return SimilarityTransform(scale=s, quat=matrix_to_quat(R), trans=t)


def _common_registered(est: Trajectory, gt: Trajectory):
    ids = sorted(set(est.registered_ids()) & set(gt.registered_ids()))
    return ids


def _centers(traj, ids):
    return np.stack([traj.poses[i].center for i in ids])


def gt_scale(gt_centers):
    """RMS distance of centers from their centroid (trajectory scale)."""
    c = np.asarray(gt_centers, float)
    return float(np.sqrt(((c - c.mean(axis=0)) ** 2).sum(axis=1).mean()))


def ate(est: Trajectory, gt: Trajectory) -> float:
    """Mean aligned center error normalized by the ground-truth scale.

    Only cameras registered in both trajectories take part in the alignment.
    """
    ids = _common_registered(est, gt)
    if len(ids) < 3:
        raise DegenerateConfiguration("need at least 3 commonly registered cameras")
    ec = _centers(est, ids)
    gc = _centers(gt, ids)
    T = procrustes_align(ec, gc)
    D = gt_scale(gc)
    if D <= 0:
        raise DegenerateConfiguration("ground-truth centers are coincident")
    err = np.linalg.norm(T.apply(ec) - gc, axis=1)
    return float(err.mean() / D)


def _pair_errors(est: Trajectory, gt: Trajectory, camera_center_directions=False):
    """Per-pair relative rotation and translation-direction errors (degrees).

    Pairs with an unregistered camera get infinite error.  Near-zero relative
    translations compare as 0 degrees when both sides vanish and 90 degrees
    when only one does.
    """
    ids = sorted(gt.registered_ids())
    gc = _centers(gt, ids)
    D = gt_scale(gc) if len(ids) >= 2 else 1.0
    thr = ZERO_TRANSLATION_REL * D + 1e-12
    rot_err, tr_err = [], []
    for x in range(len(ids)):
        for y in range(x + 1, len(ids)):
            i, j = ids[x], ids[y]
            pe_i, pe_j = est.poses.get(i), est.poses.get(j)
            if pe_i is None or pe_j is None:
                rot_err.append(np.inf)
                tr_err.append(np.inf)
                continue
            rel_e = pe_i.compose(pe_j.inverse())
            rel_g = gt.poses[i].compose(gt.poses[j].inverse())
            rot_err.append(np.degrees(rotation_angle(rel_e.rotation, rel_g.rotation)))
            if camera_center_directions:
                te = pe_i.center - pe_j.center
                tg = gt.poses[i].center - gt.poses[j].center
            else:
                te, tg = rel_e.trans, rel_g.trans
            ne,ng = np.linalg.norm(te), np.linalg.norm(tg)
            if ne <= thr and ng <= thr:
                tr_err.append(0.0)
            elif ne <= thr or ng <= thr:
                tr_err.append(90.0)
            else:
                cos = np.clip(np.dot(te / ne, tg / ng), -1.0, 1.0)
                tr_err.append(np.degrees(np.arccos(cos)))
    return np.array(rot_err), np.array(tr_err)


def rra_rta(est: Trajectory, gt: Trajectory, tau, camera_center_directions=False):
    """Percentages of pairs with relative rotation / translation error < tau."""
    rot, tr = _pair_errors(est, gt, camera_center_directions)
    if len(rot) == 0:
        raise DegenerateConfiguration("need at least 2 registered cameras")
    return (float(100.0 * (rot < tau).mean()), float(100.0 * (tr < tau).mean()))


def maa(est: Trajectory, gt: Trajectory, tau_max=30,
        camera_center_directions=False) -> float:
    """Area under min(RRA, RTA) over integer thresholds 1..tau_max, in [0,1]."""
    rot, tr = _pair_errors(est, gt, camera_center_directions)
    if len(rot) == 0:
        raise DegenerateConfiguration("need at least 2 registered cameras")
    acc = 0.0
    for t in range(1, tau_max + 1):
        rra = (rot < t).mean()
        rta = (tr < t).mean()
        acc += min(rra, rta)
    return float(acc / tau_max)


def registration_rate(traj: Trajectory) -> float:
    """Percentage of cameras with a pose; an empty trajectory rates 0."""
    if len(traj) == 0:
        return 0.0
    return float(100.0 * len(traj.registered_ids()) / len(traj))


# --- trajectory file format ------------------------------------------
#
# One camera per line: ``id qw qx qy qz tx ty tz`` (world-to-camera) or
# ``id unregistered``; whitespace separated plain text.

def trajectory_to_lines(traj: Trajectory):
    lines = []
    for cam_id in sorted(traj.poses):
        pose = traj.poses[cam_id]
        if pose is None:
            lines.append(f"{cam_id} unregistered")
        else:
            vals = " ".join(repr(float(v)) for v in (*pose.quat, *pose.trans))
            lines.append(f"{cam_id} {vals}")
    return lines


def trajectory_from_lines(lines) -> Trajectory:
    poses = {}
    for ln, raw in enumerate(lines, 1):
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        parts = raw.split()
        try:
            cam_id = int(parts[0])
            if len(parts) == 2 and parts[1] == "unregistered":
                poses[cam_id] = None
            elif len(parts) == 8:
                vals = [float(v) for v in parts[1:]]
                poses[cam_id] = Pose(np.array(vals[:4]), np.array(vals[4:]))
            else:
                raise ValueError("expected 8 fields or 'unregistered'")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"trajectory line {ln}: {exc}") from exc
        if cam_id in poses and list(poses).count(cam_id) > 1:
            raise ValueError(f"trajectory line {ln}: duplicate id {cam_id}")
    return Trajectory(poses=poses)
