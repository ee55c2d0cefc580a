"""Two-stage global optimization of poses, scales, focals and anchor depths.

Stage one rigidly aligns canonical pointmaps by minimizing confidence-
weighted 3D distances between matched points over poses and per-camera
scales.  Stage two refines poses, scales, focals and anchor depths under a
robust 2D reprojection loss.  Both stages run Adam with a cosine learning
rate schedule; gradients come from the autodiff tape, with the per-camera
scale normalization (min sigma == 1) applied inside every loss evaluation so
gradients flow through it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteLoss, TooFewMatches
from .evalmetrics import Trajectory, umeyama
from .geometry import (EPS_Z, Pose, compose_world_pose, matrix_to_quat,
                       quat_to_matrix)

QMIN_REL = 0.5          # confidence filter for initialization, relative to max
EPS_RHO = 1e-8          # smoothing inside both loss norms


@dataclass(frozen=True)
class OptimConfig:
    nu1: int = 300
    nu2: int = 300
    lr1: float = 0.07
    lr2: float = 0.014
    lam1: float = 1.5
    lam2: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eps_rho: float = EPS_RHO
    seed: int = 0

    def __post_init__(self):
        if self.nu1 < 0 or self.nu2 < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.lr1 <= 0 or self.lr2 <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.lam2 <= 2.0:
            # the robust range is (0, 1]; values up to 2 are allowed for the
            # quadratic-loss ablation
            raise ValueError("lam2 must lie in (0, 2]")


@dataclass
class SceneState:
    """Free parameters plus the frozen canonical data they act on."""

    width: int
    height: int
    delta: int
    tree: object                     # KinematicTree
    views: list                      # CanonicalView per camera
    quat: np.ndarray                 # (N,4) tree-relative free rotations
    trans: np.ndarray                # (N,3) tree-relative free translations
    log_sigma: np.ndarray            # (N,) unconstrained pre-scale
    log_focal: np.ndarray            # (1,) shared or (N,) separate
    log_anchor: np.ndarray           # concatenated per-camera anchor depths
    shared_focal: bool = True
    freeze_depth: bool = False
    rotation_center: bool = True
    anchor_starts: np.ndarray = None
    anchor_shapes: list = None

    @property
    def n_cams(self):
        return len(self.views)

    @classmethod
    def from_views(cls, views, tree, width, height, delta, shared_focal=True,
                   freeze_depth=False, rotation_center=True):
        n = len(views)
        focals = np.array([v.focal for v in views])
        log_focal = np.array([np.log(np.median(focals))]) if shared_focal \
            else np.log(focals)
        anchors = [v.anchors.anchor_depths for v in views]
        starts = np.concatenate([[0], np.cumsum([a.size for a in anchors])])[:-1]
        return cls(width=width, height=height, delta=delta, tree=tree,
                   views=views,
                   quat=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
                   trans=np.zeros((n, 3)),
                   log_sigma=np.zeros(n),
                   log_focal=log_focal,
                   log_anchor=np.log(np.concatenate([a.ravel() for a in anchors])),
                   shared_focal=shared_focal, freeze_depth=freeze_depth,
                   rotation_center=rotation_center,
                   anchor_starts=starts,
                   anchor_shapes=[a.shape for a in anchors])

    # --- derived quantities (non-taped reference path) ----------------

    def sigmas(self):
        sp = np.exp(self.log_sigma)
        return sp / sp.min()

    def focals(self):
        f = np.exp(self.log_focal)
        return np.full(self.n_cams, f[0]) if self.shared_focal else f

    def median_depths(self):
        return np.array([v.median_depth for v in self.views])

    def post_translations(self):
        """Current rotation-center z-shifts per camera (empty when disabled)."""
        if not self.rotation_center:
            return {}
        f = self.focals()
        med = self.median_depths()
        canon = np.array([v.focal for v in self.views])
        return {i: med[i] * f[i] / canon[i] for i in range(self.n_cams)}

    def world_poses(self):
        """Scaled-rigid world-to-camera poses composed through the tree."""
        post = self.post_translations()
        shifts = post if post else None

        state = self

        class _TreeView:
            root = self.tree.root
            parents = {c: (p[0],) for c, p in self.tree.parents.items()}

            def node_pose(self, node):
                return Pose(state.quat[node], state.trans[node])

        tv = _TreeView()
        if self.tree.mode == "none" or not self.tree.parents:
            out = []
            for i in range(self.n_cams):
                p = Pose(self.quat[i], self.trans[i])
                if shifts:
                    p = Pose(p.quat, p.trans + np.array([0.0, 0.0, shifts[i]]))
                out.append(p)
            return out
        return [compose_world_pose(tv, i, post_translations=shifts)
                for i in range(self.n_cams)]

    def anchor_grid(self, cam):
        lo = self.anchor_starts[cam]
        shape = self.anchor_shapes[cam]
        return np.exp(self.log_anchor[lo:lo + shape[0] * shape[1]]).reshape(shape)

    def depth_at(self, cam, i, j):
        """Current depth of integer pixel (i, j): frozen ratio times anchor."""
        view = self.views[cam]
        if self.freeze_depth:
            return float(view.depth[j, i])
        u, v = int(i) // self.delta, int(j) // self.delta
        return float(view.anchors.offsets[j, i] * self.anchor_grid(cam)[u, v])

    def physical_trajectory(self) -> Trajectory:
        """Rigid world-to-camera poses for evaluation: translation divided by
        the per-camera scale so depths live in world units."""
        sig = self.sigmas()
        poses = {}
        for i, p in enumerate(self.world_poses()):
            poses[i] = Pose(p.quat, p.trans / sig[i])
        return Trajectory(poses=poses)

    # --- parameter flattening for the optimizer ------------------------

    def param_names(self, stage):
        names = ["quat", "trans", "log_sigma"]
        if stage == "refine":
            names.append("log_focal")
            if not self.freeze_depth:
                names.append("log_anchor")
        return names

    def flatten(self, stage):
        return np.concatenate([getattr(self, n).ravel() for n in self.param_names(stage)])

    def unflatten(self, stage, vec):
        lo = 0
        for n in self.param_names(stage):
            arr = getattr(self, n)
            hi = lo + arr.size
            setattr(self, n, vec[lo:hi].reshape(arr.shape).copy())
            lo = hi
        # cheap projection back to the quaternion manifold after each step
        self.quat /= np.linalg.norm(self.quat, axis=1, keepdims=True)


def constrained_point(state: SceneState, cam, pixel):
    """3D point of one pixel under the current state: anchored depth pushed
    through the inverse projection of the composed world pose."""
    i, j = int(pixel[0]), int(pixel[1])
    z = state.depth_at(cam, i, j)
    pose = state.world_poses()[cam]
    f = state.focals()[cam]
    sig = state.sigmas()[cam]
    cx, cy = state.width / 2.0, state.height / 2.0
    ray = np.array([(i - cx) / f, (j - cy) / f, 1.0]) * z
    return (pose.rotation.T @ (ray - pose.trans)) / sig


# --- compiled match terms --------------------------------------------

def _bilinear_corners(pix, W, H):
    u = np.clip(pix[:, 0], 0.0, W - 1.0)
    v = np.clip(pix[:, 1], 0.0, H - 1.0)
    i0 = np.clip(np.floor(u), 0, W - 2).astype(int)
    j0 = np.clip(np.floor(v), 0, H - 2).astype(int)
    fu, fv = u - i0, v - j0
    ii = np.stack([i0, i0 + 1, i0, i0 + 1], axis=1)
    jj = np.stack([j0, j0, j0 + 1, j0 + 1], axis=1)
    ww = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv),
                   (1 - fu) * fv, fu * fv], axis=1)
    return ii, jj, ww


@dataclass
class CompiledMatches:
    """Index arrays turning match sets into vectorized loss terms."""

    # directed reprojection terms (two per match)
    src_cam: np.ndarray
    dst_cam: np.ndarray
    q: np.ndarray
    corner_anchor: np.ndarray    # (T,4) global flat anchor indices
    corner_off: np.ndarray       # (T,4) frozen depth ratios at the corners
    corner_du: np.ndarray        # (T,4) i - cx
    corner_dv: np.ndarray        # (T,4) j - cy
    corner_w: np.ndarray         # (T,4) bilinear weights
    corner_zcanon: np.ndarray    # (T,4) canonical depths (freeze-depth path)
    dst_t: np.ndarray            # (T,2) observed target pixels
    # undirected 3D matching terms (one per match)
    pair_cam_a: np.ndarray
    pair_cam_b: np.ndarray
    pair_q: np.ndarray
    pair_pt_a: np.ndarray        # (M,3) canonical camera-space points
    pair_pt_b: np.ndarray
    pair_valid: np.ndarray       # (M,) both canonical depths positive

    @property
    def n_terms(self):
        return len(self.q)


def compile_matches(views, matchsets, width, height, delta) -> CompiledMatches:
    W, H = width, height
    cx, cy = W / 2.0, H / 2.0
    nv_per = [v.anchors.anchor_depths.shape[1] for v in views]
    starts = np.concatenate([[0], np.cumsum([v.anchors.anchor_depths.size for v in views])])[:-1]

    src_cam, dst_cam, qs = [], [], []
    c_anchor, c_off, c_du, c_dv, c_w, c_zc, d_t = [], [], [], [], [], [], []
    pa_cam, pb_cam, p_q, p_a, p_b, p_ok = [], [], [], [], [], []

    def side_arrays(cam, pix):
        ii, jj, ww = _bilinear_corners(pix, W, H)
        view = views[cam]
        off = view.anchors.offsets[jj, ii]
        zc = view.depth[jj, ii]
        anchor = starts[cam] + (ii // delta) * nv_per[cam] + (jj // delta)
        return ii, jj, ww, off, zc, anchor

    for edge in sorted(matchsets):
        ms = matchsets[edge]
        if len(ms) == 0:
            continue
        a, b = edge
        for (src, dst, pix_src, pix_dst) in (
                (a, b, ms.pix_a, ms.pix_b), (b, a, ms.pix_b, ms.pix_a)):
            ii, jj, ww, off, zc, anchor = side_arrays(src, pix_src)
            src_cam.append(np.full(len(ms), src))
            dst_cam.append(np.full(len(ms), dst))
            qs.append(ms.conf)
            c_anchor.append(anchor)
            c_off.append(off)
            c_du.append(ii - cx)
            c_dv.append(jj - cy)
            c_w.append(ww)
            c_zc.append(zc)
            d_t.append(pix_dst)

        # coarse 3D terms: canonical camera-space points at both endpoints
        for cam, pix, store in ((a, ms.pix_a, p_a), (b, ms.pix_b, p_b)):
            ii, jj, ww, off, zc, anchor = side_arrays(cam, pix)
            f = views[cam].focal
            px = ((ii - cx) / f) * zc
            py = ((jj - cy) / f) * zc
            pt = np.stack([(px * ww).sum(axis=1), (py * ww).sum(axis=1),
                           (zc * ww).sum(axis=1)], axis=-1)
            store.append(pt)
        pa_cam.append(np.full(len(ms), a))
        pb_cam.append(np.full(len(ms), b))
        p_q.append(ms.conf)
        p_ok.append((p_a[-1][:, 2] > EPS_Z) & (p_b[-1][:, 2] > EPS_Z))

    cat = np.concatenate
    empty = lambda *shape: np.zeros(shape)
    if not src_cam:
        return CompiledMatches(
            src_cam=np.zeros(0, int), dst_cam=np.zeros(0, int), q=empty(0),
            corner_anchor=np.zeros((0, 4), int), corner_off=empty(0, 4),
            corner_du=empty(0, 4), corner_dv=empty(0, 4), corner_w=empty(0, 4),
            corner_zcanon=empty(0, 4), dst_t=empty(0, 2),
            pair_cam_a=np.zeros(0, int), pair_cam_b=np.zeros(0, int),
            pair_q=empty(0), pair_pt_a=empty(0, 3), pair_pt_b=empty(0, 3),
            pair_valid=np.zeros(0, bool))
    return CompiledMatches(
        src_cam=cat(src_cam).astype(int), dst_cam=cat(dst_cam).astype(int),
        q=cat(qs),
        corner_anchor=cat(c_anchor).astype(int), corner_off=cat(c_off),
        corner_du=cat(c_du).astype(float), corner_dv=cat(c_dv).astype(float),
        corner_w=cat(c_w), corner_zcanon=cat(c_zc), dst_t=cat(d_t),
        pair_cam_a=cat(pa_cam).astype(int), pair_cam_b=cat(pb_cam).astype(int),
        pair_q=cat(p_q), pair_pt_a=cat(p_a), pair_pt_b=cat(p_b),
        pair_valid=cat(p_ok))


# --- taped loss construction ------------------------------------------

def _pose_chain(tape, state: SceneState, leaves, f_vec):
    """Taped world poses: (Rtot (N,3,3), ttot (N,3), sigma (N,))."""
    n = state.n_cams
    qn = ad.normalize_rows(leaves["quat"])
    R_rel = ad.quat_to_rotmat(qn)
    t_rel = leaves["trans"]
    if state.rotation_center:
        med = np.array([v.median_depth for v in state.views])
        canon = np.array([v.focal for v in state.views])
        m_tilde = f_vec * (med / canon)
        zeros = tape.leaf(np.zeros(n))
        t_rel = t_rel + ad.stack([zeros, zeros, m_tilde], axis=-1)

    sp = ad.exp(leaves["log_sigma"])
    amin = int(np.argmin(ad.value_of(sp)))
    sigma = sp / ad.gather(sp, np.array([amin]))

    levels = state.tree.levels()
    order = np.concatenate([nodes for nodes, _ in levels])
    pos = np.empty(n, dtype=int)
    pos[order] = np.arange(n)

    R_cat = ad.gather(R_rel, levels[0][0])
    t_cat = ad.gather(t_rel, levels[0][0])
    for nodes, parents in levels[1:]:
        Rr = ad.gather(R_rel, nodes)
        tr = ad.gather(t_rel, nodes)
        Rp = ad.gather(R_cat, pos[parents])
        tp = ad.gather(t_cat, pos[parents])
        R_lvl = ad.matmul33(Rr, Rp)
        t_lvl = ad.matvec(Rr, tp) + tr
        R_cat = ad.concat([R_cat, R_lvl], axis=0)
        t_cat = ad.concat([t_cat, t_lvl], axis=0)
    Rtot = ad.gather(R_cat, pos)
    ttot = ad.gather(t_cat, pos)
    return Rtot, ttot, sigma


def _focal_vector(tape, state, leaves):
    f = ad.exp(leaves["log_focal"])
    if state.shared_focal:
        return ad.gather(f, np.zeros(state.n_cams, dtype=int))
    return f


def _world_points(Rg, tg, sg, campt):
    """Camera-space points to world: (1/sigma) R^T (x - t), batched."""
    diff = campt - tg
    rot = ad.matvec_t(Rg, diff)
    return rot / ad.reshape(sg, (ad.value_of(sg).shape[0], 1))


def build_coarse_loss(tape, state: SceneState, compiled: CompiledMatches, cfg):
    """Confidence-weighted 3D matching loss over canonical pointmaps.

    Intrinsics and depths stay at their canonical values; only poses and
    scales are free.  Matches with non-positive canonical depth are skipped.
    """
    leaves = {n: tape.leaf(getattr(state, n)) for n in ("quat", "trans", "log_sigma")}
    canon_f = np.array([v.focal for v in state.views])
    f_vec = tape.leaf(canon_f)   # constants: no gradient flows to focals here
    Rtot, ttot, sigma = _pose_chain(tape, state, leaves, f_vec)

    def side(cams, pts):
        Rg = ad.gather(Rtot, cams)
        tg = ad.gather(ttot, cams)
        sg = ad.gather(sigma, cams)
        return _world_points(Rg, tg, sg, tape.leaf(pts))

    xa = side(compiled.pair_cam_a, compiled.pair_pt_a)
    xb = side(compiled.pair_cam_b, compiled.pair_pt_b)
    diff = xa - xb
    dist = ad.sqrt(ad.vsum(diff * diff, axis=-1) + cfg.eps_rho ** 2)
    weights = compiled.pair_q * compiled.pair_valid
    loss = ad.vsum(ad.pow_const(dist, cfg.lam1) * weights)
    skipped = int((~compiled.pair_valid).sum())
    return loss, leaves, skipped


def build_refine_loss(tape, state: SceneState, compiled: CompiledMatches, cfg):
    """Robust 2D reprojection loss over both directions of every match.

    Anchored depths, focals, scales and poses are all free (depths frozen to
    canonical values in freeze-depth mode); projections with non-positive
    depth are skipped and counted.
    """
    names = ["quat", "trans", "log_sigma", "log_focal"]
    if not state.freeze_depth:
        names.append("log_anchor")
    leaves = {n: tape.leaf(getattr(state, n)) for n in names}
    f_vec = _focal_vector(tape, state, leaves)
    Rtot, ttot, sigma = _pose_chain(tape, state, leaves, f_vec)

    T = compiled.n_terms
    if state.freeze_depth:
        z_corners = tape.leaf(compiled.corner_zcanon)
    else:
        anchors = ad.exp(leaves["log_anchor"])
        gathered = ad.gather(anchors, compiled.corner_anchor.ravel())
        z_corners = compiled.corner_off * ad.reshape(gathered, (T, 4))
    f_src = ad.gather(f_vec, compiled.src_cam)
    fs = ad.reshape(f_src, (T, 1))
    xw = ad.vsum(compiled.corner_du * z_corners * compiled.corner_w, axis=1)
    yw = ad.vsum(compiled.corner_dv * z_corners * compiled.corner_w, axis=1)
    zw = ad.vsum(z_corners * compiled.corner_w, axis=1)
    campt = ad.stack([xw / f_src, yw / f_src, zw], axis=-1)

    Rs = ad.gather(Rtot, compiled.src_cam)
    ts = ad.gather(ttot, compiled.src_cam)
    ss = ad.gather(sigma, compiled.src_cam)
    chi = _world_points(Rs, ts, ss, campt)

    Rd = ad.gather(Rtot, compiled.dst_cam)
    td = ad.gather(ttot, compiled.dst_cam)
    sd = ad.gather(sigma, compiled.dst_cam)
    v = ad.matvec(Rd, chi) * ad.reshape(sd, (T, 1)) + td
    vz = v[:, 2]
    in_front = ad.value_of(vz) > EPS_Z
    iz = ad.safe_recip_pos(vz, EPS_Z)
    f_dst = ad.gather(f_vec, compiled.dst_cam)
    cx, cy = state.width / 2.0, state.height / 2.0
    u = f_dst * v[:, 0] * iz + cx
    w = f_dst * v[:, 1] * iz + cy
    rx = compiled.dst_t[:, 0] - u
    ry = compiled.dst_t[:, 1] - w
    rho = ad.pow_const(rx * rx + ry * ry + cfg.eps_rho ** 2, cfg.lam2 / 2.0)
    src_ok = ad.value_of(zw) > EPS_Z
    keep = (in_front & src_ok).astype(float)
    loss = ad.vsum(rho * (compiled.q * keep))
    skipped = int(T - keep.sum())
    return loss, leaves, skipped


def evaluate_loss(state, compiled, stage, cfg):
    tape = ad.Tape()
    builder = build_coarse_loss if stage == "coarse" else build_refine_loss
    loss, _, skipped = builder(tape, state, compiled, cfg)
    return float(ad.value_of(loss)), skipped


def loss_and_gradients(state, compiled, stage, cfg):
    """Loss value plus exact gradients for every free parameter of the stage."""
    tape = ad.Tape()
    builder = build_coarse_loss if stage == "coarse" else build_refine_loss
    loss, leaves, skipped = builder(tape, state, compiled, cfg)
    ad.backward(loss)
    grads = {}
    for name in state.param_names(stage):
        if name in leaves and leaves[name].grad is not None:
            grads[name] = leaves[name].grad
        else:
            grads[name] = np.zeros_like(getattr(state, name))
    return float(ad.value_of(loss)), grads, skipped


# --- initialization ---------------------------------------------------

def _bilinear_sample(grid, pix):
    """Sample (H,W,...) grids at float pixels."""
    H, W = grid.shape[:2]
    ii, jj, ww = _bilinear_corners(np.asarray(pix, float), W, H)
    vals = grid[jj, ii]                      # (M,4,...)
    if vals.ndim == 3:
        return (vals * ww[..., None]).sum(axis=1)
    return (vals * ww).sum(axis=1)


def _edge_transform(views, pred, edge):
    """Scaled transform from the first endpoint's canonical frame to the
    second's, estimated from confident matches via weighted alignment."""
    a, b = edge
    ms = pred.matches
    if len(ms) < 3:
        raise TooFewMatches(f"edge {edge} has {len(ms)} matches")
    qmax = ms.conf.max()
    keep = ms.conf >= QMIN_REL * qmax
    if keep.sum() < 3:
        keep = np.ones(len(ms), dtype=bool)
    src = _bilinear_sample(views[a].pointmap.points, ms.pix_a[keep])
    dst_raw = _bilinear_sample(pred.ab.points, ms.pix_a[keep])
    # bridge the pair's scale gauge into b's canonical gauge
    canon_b = _bilinear_sample(views[b].depth[..., None], ms.pix_b[keep])[:, 0]
    pair_b = _bilinear_sample(pred.bb.points[:, :, 2:3], ms.pix_b[keep])[:, 0]
    ok = (canon_b > 0) & (pair_b > 0)
    if ok.sum() < 1:
        raise TooFewMatches(f"edge {edge}: no positive-depth matches")
    ratio = float(np.median(canon_b[ok] / pair_b[ok]))
    dst = dst_raw * ratio
    spread = src - src.mean(axis=0)
    if np.linalg.svd(spread, compute_uv=False)[1] < 1e-12:
        raise TooFewMatches(f"edge {edge}: degenerate match geometry")
    s, R, t = umeyama(src, dst, weights=ms.conf[keep])
    return s, R, t


def _invert_scaled(s, R, t):
    return 1.0 / s, R.T, -R.T @ t / s


def _compose_scaled(g2, g1):
    """Apply g1 then g2; each g = (s, R, t) acting as x -> s R x + t."""
    s2, R2, t2 = g2
    s1, R1, t1 = g1
    return s2 * s1, R2 @ R1, s2 * R2 @ t1 + t2


def init_from_pairs(graph, tree, predictions, views, state: SceneState) -> SceneState:
    """Initialize poses and scales by composing per-edge alignments.

    Every graph edge contributes an estimated scaled transform between the
    canonical frames of its endpoints; transforms are propagated breadth-
    first from the tree root, then converted to tree-relative parameters.
    Edges with too few usable matches fall back to identity with a warning.
    """
    n = state.n_cams
    edge_tf = {}
    for edge in sorted(graph.edges):
        if edge not in predictions:
            continue
        try:
            edge_tf[edge] = _edge_transform(views, predictions[edge], edge)
        except TooFewMatches as exc:
            warnings.warn(f"identity fallback: {exc}")
            edge_tf[edge] = (1.0, np.eye(3), np.zeros(3))

    adj = graph.adjacency()
    frames = {tree.root: (1.0, np.eye(3), np.zeros(3))}
    queue = [tree.root]
    while queue:
        cur = queue.pop(0)
        for nb in adj[cur]:
            if nb in frames:
                continue
            edge = (min(cur, nb), max(cur, nb))
            if edge not in edge_tf:
                continue
            g = edge_tf[edge]
            if cur != edge[0]:
                g = _invert_scaled(*g)
            frames[nb] = _compose_scaled(g, frames[cur])
            queue.append(nb)
    for i in range(n):
        if i not in frames:
            warnings.warn(f"camera {i} unreachable during initialization; identity used")
            frames[i] = (1.0, np.eye(3), np.zeros(3))

    sig = np.array([frames[i][0] for i in range(n)])
    abs_poses = [Pose(matrix_to_quat(frames[i][1]), frames[i][2]) for i in range(n)]
    state.log_sigma = np.log(sig)
    _assign_relative_poses(state, abs_poses)
    return state


def _assign_relative_poses(state: SceneState, abs_poses):
    """Write tree-relative parameters reproducing the given absolute poses."""
    post = state.post_translations()

    def strip_shift(node, pose):
        if not post:
            return pose
        return Pose(pose.quat, pose.trans - np.array([0.0, 0.0, post[node]]))

    tree = state.tree
    quat = np.zeros((state.n_cams, 4))
    trans = np.zeros((state.n_cams, 3))
    for i in range(state.n_cams):
        if tree.mode == "none" or i not in tree.parents:
            rel = abs_poses[i]
        else:
            parent = tree.parents[i][0]
            rel = abs_poses[i].compose(abs_poses[parent].inverse())
        rel = strip_shift(i, rel)
        quat[i] = rel.quat
        trans[i] = rel.trans
    state.quat = quat
    state.trans = trans


def random_init(state: SceneState, seed=0) -> SceneState:
    """Random poses at plausible scale; the coarse-necessity baseline."""
    rng = np.random.default_rng(seed)
    n = state.n_cams
    scale = float(np.median([v.median_depth for v in state.views]))
    abs_poses = []
    for _ in range(n):
        q = rng.normal(size=4)
        abs_poses.append(Pose(q, rng.normal(size=3) * 0.5 * scale))
    state.log_sigma = np.zeros(n)
    _assign_relative_poses(state, abs_poses)
    return state


def identity_init(state: SceneState) -> SceneState:
    n = state.n_cams
    state.log_sigma = np.zeros(n)
    _assign_relative_poses(state, [Pose.identity() for _ in range(n)])
    return state


# --- optimization loop -------------------------------------------------

def cosine_lr(base, it, total):
    return base * (1.0 + np.cos(np.pi * it / total)) / 2.0


def optimize(state: SceneState, compiled: CompiledMatches, cfg: OptimConfig):
    """Run both gradient-descent stages; returns (state, trace).

    Trace records one tuple (stage, iteration, lr, loss, skipped) per
    iteration.  Raises NonFiniteLoss with the failing iteration index.
    """
    trace = []
    for stage, nu, base_lr in (("coarse", cfg.nu1, cfg.lr1),
                               ("refine", cfg.nu2, cfg.lr2)):
        if nu == 0:
            continue
        theta = state.flatten(stage)
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        for it in range(nu):
            loss, grads, skipped = loss_and_gradients(state, compiled, stage, cfg)
            if not np.isfinite(loss):
                raise NonFiniteLoss(stage, it)
            lr = cosine_lr(base_lr, it, nu)
            trace.append((stage, it, lr, loss, skipped))
            g = np.concatenate([grads[n].ravel() for n in state.param_names(stage)])
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            t = it + 1
            mhat = m / (1 - cfg.beta1 ** t)
            vhat = v / (1 - cfg.beta2 ** t)
            theta = theta - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
            state.unflatten(stage, theta)
            theta = state.flatten(stage)  # re-read after quaternion projection
    return state, trace


def trace_lines(trace):
    return [f"{stage} {it} {lr!r} {loss!r} {skipped}"
            for stage, it, lr, loss, skipped in trace]


def apply_gauge(state: SceneState, scale, R, t):
    """Re-express the state after a world gauge change x -> scale R x + t.

    Loss values are invariant under this re-expression (the in-loss sigma
    normalization quotients the scale away); used by tests.
    """
    poses = state.world_poses()
    sig = np.exp(state.log_sigma)
    new_abs = []
    for i, p in enumerate(poses):
        Rn = p.rotation @ R.T
        tn = p.trans - Rn @ t * (sig[i] / scale)
        new_abs.append(Pose(matrix_to_quat(Rn), tn))
    state.log_sigma = np.log(sig / scale)
    _assign_relative_poses(state, new_abs)
    return state
