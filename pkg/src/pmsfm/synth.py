"""Synthetic scene oracle: ground-truth cameras over closed-form surfaces,
plus a simulator for the pairwise predictor (pointmaps, features, matches,
confidences) with controllable noise, outliers and per-edge scale gauges.

Surfaces are unions of spheres and horizontal planes inside a large
enclosing sphere, so every pixel ray has a closed-form first intersection
and depth maps are dense by construction.  Per-pixel features are sinusoidal
encodings of the ground-truth surface point, which makes reciprocal feature
matching recover ground-truth correspondences at zero noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoOverlap
from .geometry import CameraParams, Intrinsics, Pose, matrix_to_quat
from .local_recon import MatchSet, PairPrediction, grid_seeds
from .retrieval import FeatureMap
from .geometry import PointMap

RAY_TMIN = 1e-6
OCCLUSION_TOL = 0.02  # relative depth agreement for visibility


@dataclass(frozen=True)
class NoiseConfig:
    depth_noise: float = 0.0           # std of multiplicative log-normal depth noise
    match_outlier_rate: float = 0.0    # fraction of matches replaced by random pairs
    confidence_fidelity: float = 0.5   # 0: uninformative confidences, 1: oracle
    pure_rotation: bool = False        # all cameras share one optical center

    def __post_init__(self):
        if not 0.0 <= self.match_outlier_rate < 1.0:
            raise ValueError("outlier rate must be in [0, 1)")
        if not 0.0 <= self.confidence_fidelity <= 1.0:
            raise ValueError("confidence fidelity must be in [0, 1]")
        if self.depth_noise < 0:
            raise ValueError("depth noise must be non-negative")


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def intersect(self, origins, dirs):
        oc = origins - self.center
        a = (dirs * dirs).sum(axis=-1)
        b = 2.0 * (dirs * oc).sum(axis=-1)
        c = (oc * oc).sum(axis=-1) - self.radius ** 2
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t1 = (-b - sq) / (2 * a)
        t2 = (-b + sq) / (2 * a)
        t = np.where(t1 > RAY_TMIN, t1, t2)
        return np.where(ok & (t > RAY_TMIN), t, np.inf)


@dataclass(frozen=True)
class HorizontalPlane:
    z: float

    def intersect(self, origins, dirs):
        dz = dirs[..., 2]
        t = np.where(np.abs(dz) > 1e-12, (self.z - origins[..., 2]) / np.where(np.abs(dz) > 1e-12, dz, 1.0), np.inf)
        return np.where(t > RAY_TMIN, t, np.inf)


@dataclass
class SynthScene:
    kind: str
    seed: int
    width: int
    height: int
    focal: float
    cameras: list
    surfaces: list
    samples: np.ndarray         # reference surface points for visibility metrics
    noise: NoiseConfig
    feat_dim: int = 8
    _freqs: np.ndarray = None
    _phases: np.ndarray = None
    _renders: dict = field(default_factory=dict)
    _features: dict = field(default_factory=dict)

    @property
    def n_views(self):
        return len(self.cameras)

    def intrinsics(self):
        return Intrinsics(self.focal, self.width, self.height)

    def pixel_rays(self, cam: CameraParams):
        """World-space ray directions with unit camera-frame z, so the ray
        parameter equals camera depth."""
        W, H = self.width, self.height
        cx, cy = cam.intrinsics.principal_point
        ii, jj = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float), indexing="xy")
        rays_cam = np.stack([(ii - cx) / cam.intrinsics.focal,
                             (jj - cy) / cam.intrinsics.focal,
                             np.ones_like(ii)], axis=-1)
        return rays_cam @ cam.pose.rotation  # (R^T ray) per pixel

    def render(self, view):
        """(world points (H,W,3), depth (H,W)) of the first surface hit."""
        if view in self._renders:
            return self._renders[view]
        cam = self.cameras[view]
        origin = cam.pose.center
        dirs = self.pixel_rays(cam)
        t = np.full(dirs.shape[:2], np.inf)
        for surf in self.surfaces:
            t = np.minimum(t, surf.intersect(origin[None, None], dirs))
        if not np.all(np.isfinite(t)):
            raise RuntimeError("a pixel ray escaped the enclosing sphere")
        pts = origin + t[..., None] * dirs
        self._renders[view] = (pts, t)
        return self._renders[view]

    def feature_map(self, view) -> FeatureMap:
        """Sinusoidal position encoding of the ground-truth surface points."""
        if view in self._features:
            return self._features[view]
        pts, _ = self.render(view)
        enc = np.sin(pts @ self._freqs.T + self._phases)
        self._features[view] = FeatureMap(enc)
        return self._features[view]

    def project(self, view, pts):
        """Pixel coordinates and camera depths of world points (no guards)."""
        cam = self.cameras[view]
        v = pts @ cam.pose.rotation.T + cam.pose.trans
        cx, cy = cam.intrinsics.principal_point
        f = cam.intrinsics.focal
        with np.errstate(divide="ignore", invalid="ignore"):
            pix = np.stack([f * v[..., 0] / v[..., 2] + cx,
                            f * v[..., 1] / v[..., 2] + cy], axis=-1)
        return pix, v[..., 2]

    def point_visibility(self, view, pts):
        """True where world points are in front, in bounds and unoccluded.

        Occlusion compares the point's depth against the bilinearly
        interpolated rendered depth, which stays tight on slanted surfaces.
        """
        pix, z = self.project(view, pts)
        _, depth = self.render(view)
        ok = z > RAY_TMIN
        ok &= (pix[..., 0] >= 0) & (pix[..., 0] <= self.width - 1)
        ok &= (pix[..., 1] >= 0) & (pix[..., 1] <= self.height - 1)
        u = np.clip(pix[..., 0], 0, self.width - 1)
        v = np.clip(pix[..., 1], 0, self.height - 1)
        i0 = np.clip(np.floor(u), 0, self.width - 2).astype(int)
        j0 = np.clip(np.floor(v), 0, self.height - 2).astype(int)
        fu, fv = u - i0, v - j0
        rendered = (depth[j0, i0] * (1 - fu) * (1 - fv)
                    + depth[j0, i0 + 1] * fu * (1 - fv)
                    + depth[j0 + 1, i0] * (1 - fu) * fv
                    + depth[j0 + 1, i0 + 1] * fu * fv)
        ok &= np.abs(z - rendered) <= OCCLUSION_TOL * np.maximum(rendered, 1e-9) + 1e-6
        return ok

    def in_front_fraction(self, view):
        """Fraction of reference samples in front of the camera and in frame."""
        pix, z = self.project(view, self.samples)
        ok = z > RAY_TMIN
        ok &= (pix[..., 0] >= 0) & (pix[..., 0] <= self.width - 1)
        ok &= (pix[..., 1] >= 0) & (pix[..., 1] <= self.height - 1)
        return float(ok.mean())

    def sample_visibility(self, view):
        return self.point_visibility(view, self.samples)

    def pair_overlap(self, a, b):
        """Fraction of reference samples co-visible in both views."""
        va = self.sample_visibility(a)
        vb = self.sample_visibility(b)
        return float((va & vb).mean())

    def gt_trajectory(self):
        return [(i, cam.pose) for i, cam in enumerate(self.cameras)]


def _look_at(center, target, up_hint=np.array([0.0, 0.0, 1.0])):
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, up_hint)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])       # rows: camera axes in world
    return Pose(matrix_to_quat(R), -R @ center)


def _surfaces_for(kind, rng):
    enclosure = Sphere(center=np.zeros(3), radius=40.0)
    if kind == "plane":
        return [HorizontalPlane(z=-1.2), enclosure]
    if kind == "sphere":
        return [Sphere(center=np.zeros(3), radius=1.6), enclosure]
    if kind == "blobs":
        spheres = []
        for _ in range(5):
            c = np.array([*(rng.normal(size=2) * 0.7), rng.uniform(-0.3, 0.5)])
            spheres.append(Sphere(center=c, radius=float(rng.uniform(0.3, 0.55))))
        return [HorizontalPlane(z=-1.2), *spheres, enclosure]
    raise ValueError(f"unknown scene kind {kind!r}")


def _reference_samples(surfaces, rng):
    pts = []
    for surf in surfaces:
        if isinstance(surf, HorizontalPlane):
            n = 600
            r = np.sqrt(rng.uniform(0, 1, size=n)) * 2.2
            th = rng.uniform(0, 2 * np.pi, size=n)
            pts.append(np.stack([r * np.cos(th), r * np.sin(th),
                                 np.full(n, surf.z)], axis=1))
        elif isinstance(surf, Sphere) and surf.radius < 10:
            v = rng.normal(size=(120, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            pts.append(surf.center + surf.radius * v)
    return np.vstack(pts)


def generate_scene(kind="blobs", n_views=8, seed=0, width=48, height=48,
                   focal=None, noise=None, arc_degrees=60.0) -> SynthScene:
    """Deterministic scene with cameras on a jittered orbit arc (or a fixed
    center with varied look directions when noise.pure_rotation is set)."""
    if n_views < 1:
        raise ValueError("need at least one view")
    noise = noise or NoiseConfig()
    rng = np.random.default_rng(seed)
    surfaces = _surfaces_for(kind, rng)
    samples = _reference_samples(surfaces, rng)
    if focal is None:
        focal = 0.95 * width
    intr = Intrinsics(float(focal), width, height)

    cameras = []
    if noise.pure_rotation:
        center = np.array([3.8, 0.0, 1.9]) + rng.normal(size=3) * 0.05
        base_target = np.zeros(3)
        fwd0 = base_target - center
        yaws = (np.linspace(-0.5, 0.5, n_views) if n_views > 1 else np.zeros(1)) * np.deg2rad(30.0)
        for k in range(n_views):
            yaw = yaws[k] + rng.normal() * np.deg2rad(0.5)
            pitch = rng.normal() * np.deg2rad(2.0)
            cy, sy = np.cos(yaw), np.sin(yaw)
            Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
            axis = np.cross(fwd0 / np.linalg.norm(fwd0), np.array([0.0, 0.0, 1.0]))
            axis /= np.linalg.norm(axis)
            cp, sp = np.cos(pitch), np.sin(pitch)
            K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
            Rp = np.eye(3) + sp * K + (1 - cp) * (K @ K)
            fwd = Rp @ (Rz @ fwd0)
            cameras.append(CameraParams(intr, _look_at(center, center + fwd), sigma=1.0))
    else:
        span = np.deg2rad(arc_degrees)
        base = rng.uniform(0, 2 * np.pi)
        for k in range(n_views):
            frac = (k / (n_views - 1) - 0.5) if n_views > 1 else 0.0
            theta = base + span * frac + rng.normal() * span * 0.01
            rho = 4.0 * (1.0 + rng.normal() * 0.05)
            zz = 2.1 + rng.normal() * 0.15
            center = np.array([rho * np.cos(theta), rho * np.sin(theta), zz])
            target = rng.normal(size=3) * 0.1
            cameras.append(CameraParams(intr, _look_at(center, target), sigma=1.0))

    dirs = rng.normal(size=(8, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    freqs = dirs * np.geomspace(0.7, 3.5, 8)[:, None]
    phases = rng.uniform(0, 2 * np.pi, size=8)

    scene = SynthScene(kind=kind, seed=seed, width=width, height=height,
                       focal=float(focal), cameras=cameras, surfaces=surfaces,
                       samples=samples, noise=noise, feat_dim=8,
                       _freqs=freqs, _phases=phases)
    for v in range(n_views):
        if scene.in_front_fraction(v) < 0.5:
            raise RuntimeError(f"view {v} sees less than half of the surface samples")
    return scene


def _directed_matches(scene, src, dst, spacing, rng, noise):
    """Ground-truth correspondences seeded on src's grid, with outliers."""
    pts_src, _ = scene.render(src)
    seeds = grid_seeds(scene.width, scene.height, spacing)
    world = pts_src[seeds[:, 1], seeds[:, 0]]
    visible = scene.point_visibility(dst, world)
    pix_dst, _ = scene.project(dst, world)
    pix_src = seeds.astype(float)
    pix_src, pix_dst = pix_src[visible], pix_dst[visible]
    m = len(pix_src)
    outlier = rng.random(m) < noise.match_outlier_rate
    rand_pix = np.stack([rng.uniform(0, scene.width - 1, size=m),
                         rng.uniform(0, scene.height - 1, size=m)], axis=1)
    pix_dst = np.where(outlier[:, None], rand_pix, pix_dst)
    q = np.where(outlier, max(0.05, 1.0 - 0.95 * noise.confidence_fidelity), 1.0)
    return pix_src, pix_dst, q, outlier


def _noisy_world(scene, view, rng, noise):
    """Surface points pushed along their rays by log-normal depth noise."""
    pts, depth = scene.render(view)
    cam = scene.cameras[view]
    if noise.depth_noise <= 0:
        conf = np.ones_like(depth)
        return pts, conf
    eps = rng.normal(size=depth.shape) * noise.depth_noise
    ratio = np.exp(eps)
    origin = cam.pose.center
    noisy = origin + ratio[..., None] * (pts - origin)
    conf = 1.0 / (1.0 + noise.confidence_fidelity * np.abs(eps) / noise.depth_noise)
    return noisy, conf


def simulate_pair(scene: SynthScene, edge, noise=None, match_spacing=8) -> PairPrediction:
    """One pairwise forward pass: four pointmaps sharing a random scale gauge,
    per-image feature maps, and ground-truth matches with injected outliers."""
    a, b = edge
    noise = noise or scene.noise
    rng = np.random.default_rng((scene.seed, 7919, a, b))
    gauge = float(np.exp(rng.uniform(-0.6, 0.6)))

    world_a, conf_a = _noisy_world(scene, a, rng, noise)
    world_b, conf_b = _noisy_world(scene, b, rng, noise)
    Pa, Pb = scene.cameras[a].pose, scene.cameras[b].pose

    def pm(world, pose, frame, conf):
        return PointMap(frame=frame, points=gauge * pose.apply(world), confidence=conf)

    aa = pm(world_a, Pa, a, conf_a)
    ab = pm(world_a, Pb, b, conf_a)
    bb = pm(world_b, Pb, b, conf_b)
    ba = pm(world_b, Pa, a, conf_b)

    sa, da_, qa, oa = _directed_matches(scene, a, b, match_spacing, rng, noise)
    sb, db_, qb, ob = _directed_matches(scene, b, a, match_spacing, rng, noise)
    pix_a = np.vstack([sa, db_])
    pix_b = np.vstack([da_, sb])
    q = np.concatenate([qa, qb])
    mask = np.concatenate([~oa, ~ob])
    # drop duplicate pairs (rounded-pixel key), keeping the first occurrence
    keys = {}
    keep = []
    for idx, (p1, p2) in enumerate(zip(np.round(pix_a).astype(int), np.round(pix_b).astype(int))):
        key = (p1[0], p1[1], p2[0], p2[1])
        if key not in keys:
            keys[key] = idx
            keep.append(idx)
    keep = np.array(keep, dtype=int)
    if len(keep) == 0:
        raise NoOverlap(f"views {a} and {b} share no co-visible surface")
    matches = MatchSet(edge=(a, b), pix_a=pix_a[keep], pix_b=pix_b[keep],
                       conf=q[keep], inlier_mask=mask[keep])
    return PairPrediction(edge=(a, b), aa=aa, ab=ab, bb=bb, ba=ba,
                          feat_a=scene.feature_map(a), feat_b=scene.feature_map(b),
                          matches=matches)
