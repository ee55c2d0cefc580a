"""Per-image and per-pair precomputation for the global optimization:
reciprocal feature matching, canonical pointmap aggregation, focal estimation
by iteratively-reweighted least squares, and anchor-depth grids that tie every
pixel's depth to a coarse grid by a frozen ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateGeometry, DimensionMismatch, EmptyEstimates,
                     MissingPrediction, NonPositiveDepth, ShapeMismatch)
from .geometry import EPS_Z, PointMap
from .retrieval import FeatureMap

WEISZFELD_ITERS = 10
RESIDUAL_FLOOR = 1e-8


@dataclass
class MatchSet:
    """Pixel correspondences for one edge; pixels may be subpixel floats."""

    edge: tuple
    pix_a: np.ndarray       # (M,2) pixels in the first image of the edge
    pix_b: np.ndarray       # (M,2) pixels in the second image
    conf: np.ndarray        # (M,) confidence weights q >= 0
    inlier_mask: np.ndarray = None   # diagnostics only; never read by the solver

    def __post_init__(self):
        self.pix_a = np.asarray(self.pix_a, dtype=float).reshape(-1, 2)
        self.pix_b = np.asarray(self.pix_b, dtype=float).reshape(-1, 2)
        self.conf = np.asarray(self.conf, dtype=float).reshape(-1)
        if not (len(self.pix_a) == len(self.pix_b) == len(self.conf)):
            raise ValueError("match arrays must share their length")
        if np.any(self.conf < 0) or not np.all(np.isfinite(self.conf)):
            raise ValueError("confidences must be finite and non-negative")

    def __len__(self):
        return len(self.conf)


@dataclass
class PairPrediction:
    """Stand-in for one pairwise forward pass on edge (a, b).

    Pointmaps: own frame of a (aa), a's pixels in b's frame (ab), own frame
    of b (bb), b's pixels in a's frame (ba).  All four share one arbitrary
    per-edge scale gauge.
    """

    edge: tuple
    aa: PointMap
    ab: PointMap
    bb: PointMap
    ba: PointMap
    feat_a: FeatureMap
    feat_b: FeatureMap
    matches: MatchSet

    def own_pointmap(self, node):
        if node == self.edge[0]:
            return self.aa
        if node == self.edge[1]:
            return self.bb
        raise KeyError(f"node {node} not on edge {self.edge}")


@dataclass
class AnchorGrid:
    """Anchor depths on a delta-spaced grid plus frozen per-pixel ratios."""

    spacing: int
    anchor_depths: np.ndarray   # (nu, nv), indexed [u, v] = [x cell, y cell]
    offsets: np.ndarray         # (H, W) with depth[j,i] = offsets[j,i] * anchor[u,v]

    @property
    def n_anchors(self):
        return self.anchor_depths.size

    def anchor_of(self, i, j):
        return (int(i) // self.spacing, int(j) // self.spacing)

    def reconstruct(self):
        H, W = self.offsets.shape
        u = np.arange(W) // self.spacing
        v = np.arange(H) // self.spacing
        return self.offsets * self.anchor_depths[u[None, :], v[:, None]]


@dataclass
class CanonicalView:
    image_id: int
    pointmap: PointMap          # confidence-weighted aggregate, own frame
    focal: float
    anchors: AnchorGrid

    @property
    def depth(self):
        return self.pointmap.points[:, :, 2]

    @property
    def median_depth(self):
        return float(np.median(self.depth))


def grid_seeds(width, height, spacing):
    """Cell-center pixels of a delta-spaced grid, clamped into bounds."""
    us = np.arange((width + spacing - 1) // spacing)
    vs = np.arange((height + spacing - 1) // spacing)
    i = np.minimum(us * spacing + spacing // 2, width - 1)
    j = np.minimum(vs * spacing + spacing // 2, height - 1)
    ii, jj = np.meshgrid(i, j, indexing="xy")
    return np.stack([ii.ravel(), jj.ravel()], axis=1)


def fast_reciprocal_nn(da: FeatureMap, db: FeatureMap, seed_spacing=8,
                       max_iters=10) -> MatchSet:
    """Reciprocal matches by alternating nearest-neighbour hops.

    Seeds start on a regular grid in the first image and hop A->B->A until a
    mutual fixed point; ties resolve to the lowest linear pixel index.  Match
    confidence is the cosine of the matched features mapped to [0,1].
    """
    if da.dim != db.dim:
        raise DimensionMismatch(f"feature dims differ: {da.dim} vs {db.dim}")
    fa = da.tokens()
    fb = db.tokens()
    na2 = (fa * fa).sum(axis=1)
    nb2 = (fb * fb).sum(axis=1)

    def nn(feats, pool, pool_sq):
        d2 = pool_sq[None, :] - 2.0 * (feats @ pool.T)
        return np.argmin(d2, axis=1)

    seeds = grid_seeds(da.w, da.h, seed_spacing)
    cur_a = np.unique(seeds[:, 1] * da.w + seeds[:, 0])
    pairs = set()
    for _ in range(max_iters):
        if len(cur_a) == 0:
            break
        idx_b = nn(fa[cur_a], fb, nb2)
        back_a = nn(fb[idx_b], fa, na2)
        converged = back_a == cur_a
        for a, b in zip(cur_a[converged], idx_b[converged]):
            pairs.add((int(a), int(b)))
        cur_a = np.unique(back_a[~converged])
    if not pairs:
        return MatchSet(edge=(-1, -1), pix_a=np.zeros((0, 2)),
                        pix_b=np.zeros((0, 2)), conf=np.zeros(0))
    lin_a = np.array([p[0] for p in sorted(pairs)])
    lin_b = np.array([p[1] for p in sorted(pairs)])
    va, vb = fa[lin_a], fb[lin_b]
    denom = np.linalg.norm(va, axis=1) * np.linalg.norm(vb, axis=1)
    cos = np.where(denom > 0, (va * vb).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
    conf = (1.0 + np.clip(cos, -1.0, 1.0)) / 2.0
    pix_a = np.stack([lin_a % da.w, lin_a // da.w], axis=1).astype(float)
    pix_b = np.stack([lin_b % db.w, lin_b // db.w], axis=1).astype(float)
    return MatchSet(edge=(-1, -1), pix_a=pix_a, pix_b=pix_b, conf=conf)


def canonical_pointmap(estimates) -> PointMap:
    """Per-pixel confidence-weighted average of own-frame pointmap estimates.

    Pixels whose total confidence is zero fall back to the unweighted mean;
    the output confidence is the mean of the input confidences.
    """
    if len(estimates) == 0:
        raise EmptyEstimates("need at least one pointmap estimate")
    frame = estimates[0].frame
    shape = estimates[0].points.shape
    for pm in estimates:
        if pm.points.shape != shape:
            raise ShapeMismatch("estimates must share dimensions")
        if pm.frame != frame:
            raise ShapeMismatch("estimates must live in the same frame")
    pts = np.stack([pm.points for pm in estimates])        # (E,H,W,3)
    conf = np.stack([pm.confidence for pm in estimates])   # (E,H,W)
    total = conf.sum(axis=0)
    weighted = (conf[..., None] * pts).sum(axis=0)
    safe = np.where(total > 0, total, 1.0)
    avg = weighted / safe[..., None]
    fallback = pts.mean(axis=0)
    out = np.where((total > 0)[..., None], avg, fallback)
    return PointMap(frame=frame, points=out, confidence=conf.mean(axis=0))


def estimate_focal_weiszfeld(pm: PointMap) -> float:
    """Focal minimizing the summed 2D distance between centered pixels and
    f * (x/z, y/z), via iteratively-reweighted least squares.

    Initialized at the closed-form L2 solution; pixels with non-positive
    depth are excluded; residual weights are floored at 1e-8.
    """
    H, W = pm.points.shape[:2]
    ii, jj = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float), indexing="xy")
    x, y, z = pm.points[:, :, 0], pm.points[:, :, 1], pm.points[:, :, 2]
    valid = z > EPS_Z
    if valid.sum() < 10:
        raise DegenerateGeometry("need at least 10 pixels with positive depth")
    px = np.stack([(ii - W / 2.0)[valid], (jj - H / 2.0)[valid]], axis=1)
    q = np.stack([(x / np.where(valid, z, 1.0))[valid],
                  (y / np.where(valid, z, 1.0))[valid]], axis=1)
    qn2 = (q * q).sum(axis=1)
    if np.all(np.sqrt(qn2) < 1e-8):
        raise DegenerateGeometry("all points on the optical axis")
    f = float((px * q).sum() / qn2.sum())
    for _ in range(WEISZFELD_ITERS):
        r = np.linalg.norm(px - f * q, axis=1)
        w = 1.0 / np.maximum(r, RESIDUAL_FLOOR)
        f = float((w * (px * q).sum(axis=1)).sum() / (w * qn2).sum())
    return f


def build_anchor_grid(depth, spacing=8) -> AnchorGrid:
    """Anchor depths at cell centers plus frozen per-pixel depth ratios.

    Reconstruction offsets * anchor reproduces the input exactly at anchors
    (ratio is exactly 1 there) and to within a rounding of the division
    elsewhere.
    """
    Z = np.asarray(depth, dtype=float)
    if np.any(Z <= 0) or not np.all(np.isfinite(Z)):
        raise NonPositiveDepth("depth map must be strictly positive and finite")
    H, W = Z.shape
    seeds = grid_seeds(W, H, spacing)
    nu = (W + spacing - 1) // spacing
    nv = (H + spacing - 1) // spacing
    anchors = Z[seeds[:, 1].astype(int), seeds[:, 0].astype(int)].reshape(nv, nu).T
    u = np.arange(W) // spacing
    v = np.arange(H) // spacing
    offsets = Z / anchors[u[None, :], v[:, None]]
    return AnchorGrid(spacing=spacing, anchor_depths=anchors, offsets=offsets)


def incident_estimates(edges, predictions, node):
    """All own-frame pointmap estimates of ``node`` over its incident edges."""
    own = []
    for e in edges:
        if node not in e:
            continue
        if e not in predictions:
            raise MissingPrediction(f"edge {e} has no pairwise prediction")
        own.append(predictions[e].own_pointmap(node))
    return own


def canonicalize_view(edges, predictions, node, spacing=8) -> CanonicalView:
    """Aggregate a node's own-frame estimates and derive depth, focal, anchors."""
    own = incident_estimates(edges, predictions, node)
    agg = canonical_pointmap(own)
    focal = estimate_focal_weiszfeld(agg)
    anchors = build_anchor_grid(agg.points[:, :, 2], spacing=spacing)
    return CanonicalView(image_id=node, pointmap=agg, focal=focal, anchors=anchors)
