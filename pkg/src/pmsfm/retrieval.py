"""Training-free image retrieval with aggregated selective match kernels.

Per-image token features are whitened, quantized against a k-means codebook,
and per-cell residual sums are binarized into sparse +/-1 descriptors.  The
pairwise kernel sums a selective function of the normalized binary dot
product over common cells, normalized by the self-scores, giving a similarity
matrix in [0,1] that drives scene-graph construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InsufficientSamples

ALPHA = 3.0           # selectivity exponent
TAU = 0.0             # similarity threshold
EIG_FLOOR = 1e-6      # eigenvalue floor, relative to the largest eigenvalue


@dataclass(frozen=True)
class FeatureMap:
    """h x w grid of d-dimensional token features."""

    features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float)
        if f.ndim != 3:
            raise ValueError("features must be (h, w, d)")
        if f.shape[0] * f.shape[1] < 1:
            raise ValueError("feature map must contain at least one token")
        if f.shape[2] < 2:
            raise ValueError("feature dimension must be >= 2")
        if not np.all(np.isfinite(f)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", f)

    @property
    def h(self):
        return self.features.shape[0]

    @property
    def w(self):
        return self.features.shape[1]

    @property
    def dim(self):
        return self.features.shape[2]

    def tokens(self):
        return self.features.reshape(-1, self.dim)


@dataclass(frozen=True)
class Whitening:
    mean: np.ndarray
    transform: np.ndarray

    def apply(self, tokens):
        return (np.asarray(tokens, dtype=float) - self.mean) @ self.transform.T


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=float)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("centroids must be (K, d) with K >= 1")
        object.__setattr__(self, "centroids", c)

    @property
    def size(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]


@dataclass(frozen=True)
class AsmkDescriptor:
    """Sparse binary descriptor: strictly increasing cell ids, +/-1 residuals."""

    cells: np.ndarray      # (C,) int32, strictly increasing
    bits: np.ndarray       # (C, d) int8 in {-1, +1}

    @property
    def dim(self):
        return self.bits.shape[1]


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("similarity matrix must be square")
        if not np.allclose(v, v.T, atol=1e-12):
            raise ValueError("similarity matrix must be symmetric")
        if not np.allclose(np.diag(v), 1.0):
            raise ValueError("similarity matrix must have unit diagonal")
        if v.min() < 0 or v.max() > 1 + 1e-12:
            raise ValueError("similarities must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def n(self):
        return self.values.shape[0]


def fit_whitening(samples) -> Whitening:
    """PCA whitening: maps the sample covariance to identity.

    Eigenvalues are floored at EIG_FLOOR times the largest one before
    inversion, which bounds the condition number of the transform.
    """
    X = np.asarray(samples, dtype=float)
    n, d = X.shape
    if n < d + 1:
        raise InsufficientSamples(f"need at least {d + 1} samples, got {n}")
    mean = X.mean(axis=0)
    C = np.cov(X - mean, rowvar=False, bias=False)
    C = np.atleast_2d(C)
    evals, evecs = np.linalg.eigh(C)
    evals = np.maximum(evals, EIG_FLOOR * evals.max())
    transform = (evecs / np.sqrt(evals)).T
    return Whitening(mean=mean, transform=transform)


def _assign(tokens, centroids, chunk=8192):
    """Nearest-centroid ids (L2, ties resolved to the lowest id)."""
    cc = (centroids * centroids).sum(axis=1)
    out = np.empty(len(tokens), dtype=np.int64)
    for lo in range(0, len(tokens), chunk):
        t = tokens[lo:lo + chunk]
        d2 = cc[None, :] - 2.0 * (t @ centroids.T)  # monotone in true distance
        out[lo:lo + chunk] = np.argmin(d2, axis=1)
    return out


def train_codebook(samples, K, iters=10, seed=0) -> Codebook:
    """Lloyd's k-means with k-means++ seeding; deterministic given the seed.

    Empty clusters are re-seeded from the sample farthest from its centroid.
    """
    X = np.asarray(samples, dtype=float)
    n = len(X)
    if n < K:
        raise InsufficientSamples(f"need at least K={K} samples, got {n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((K, X.shape[1]))
    first = int(rng.integers(0, n))
    centroids[0] = X[first]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[k] = X[idx]
        d2 = np.minimum(d2, ((X - centroids[k]) ** 2).sum(axis=1))

    for _ in range(iters):
        assign = _assign(X, centroids)
        dist = ((X - centroids[assign]) ** 2).sum(axis=1)
        for k in range(K):
            mask = assign == k
            if mask.any():
                centroids[k] = X[mask].mean(axis=0)
            else:
                far = int(np.argmax(dist))
                centroids[k] = X[far]
                dist[far] = 0.0
    return Codebook(centroids=centroids)


def asmk_encode(fm: FeatureMap, wh: Whitening, cb: Codebook) -> AsmkDescriptor:
    """Whiten, quantize and binarize one image's tokens.

    Per cell the residual sum (token - centroid) is L2-normalized and
    binarized by sign; zero components binarize to +1.
    """
    if fm.dim != cb.dim or fm.dim != wh.mean.shape[0]:
        raise DimensionMismatch(
            f"feature dim {fm.dim} vs codebook dim {cb.dim} / whitening dim {wh.mean.shape[0]}")
    tokens = wh.apply(fm.tokens())
    assign = _assign(tokens, cb.centroids)
    cells = np.unique(assign)
    bits = np.empty((len(cells), fm.dim), dtype=np.int8)
    for row, cell in enumerate(cells):
        res = (tokens[assign == cell] - cb.centroids[cell]).sum(axis=0)
        norm = np.linalg.norm(res)
        if norm > 0:
            res = res / norm
        bits[row] = np.where(res >= 0, 1, -1)
    return AsmkDescriptor(cells=cells.astype(np.int32), bits=bits)


def _selective(u):
    # sign(u) |u|^alpha above the threshold, zero below
    return np.where(u > TAU, np.sign(u) * np.abs(u) ** ALPHA, 0.0)


def asmk_similarity(a: AsmkDescriptor, b: AsmkDescriptor) -> float:
    """Kernel similarity in [0,1]; 1 for identical non-empty descriptors."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"descriptor dims differ: {a.dim} vs {b.dim}")
    d = a.dim
    common, ia, ib = np.intersect1d(a.cells, b.cells, assume_unique=True,
                                    return_indices=True)
    if len(common) == 0:
        return 0.0
    u = (a.bits[ia].astype(float) * b.bits[ib]).sum(axis=1) / d
    raw = _selective(u).sum()
    self_a = float(len(a.cells))  # sigma_alpha(1) == 1 per cell
    self_b = float(len(b.cells))
    score = raw / np.sqrt(self_a * self_b)
    return float(np.clip(score, 0.0, 1.0))


def similarity_matrix(descriptors) -> SimilarityMatrix:
    n = len(descriptors)
    if n < 1:
        raise ValueError("need at least one descriptor")
    S = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            S[i, j] = S[j, i] = asmk_similarity(descriptors[i], descriptors[j])
    return SimilarityMatrix(values=S)


def global_pool_similarity(fa: FeatureMap, fb: FeatureMap, wh: Whitening) -> float:
    """Baseline scorer: cosine of whitened mean-pooled features, in [0,1]."""
    va = wh.apply(fa.tokens()).mean(axis=0)
    vb = wh.apply(fb.tokens()).mean(axis=0)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        return 0.5
    cos = float(np.dot(va, vb) / (na * nb))
    return float(np.clip((1.0 + cos) / 2.0, 0.0, 1.0))


# --- descriptor dump format -----------------------------------------
#
# Little-endian binary, bit-exact across platforms:
#   file header:  magic b"ASMKDUMP", u32 version=1, u32 d, u32 image count
#   per image:    u32 cell count, then per cell:
#                 u32 cell id, ceil(d/8) bytes of residual bits
#                 (bit i of the vector lives in byte i//8 at position i%8;
#                  bit set <=> component == +1); cells sorted ascending.

_MAGIC = b"ASMKDUMP"


def dump_descriptors(path, descriptors):
    if not descriptors:
        raise ValueError("nothing to dump")
    d = descriptors[0].dim
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", 1, d, len(descriptors)))
        for desc in descriptors:
            if desc.dim != d:
                raise DimensionMismatch("mixed descriptor dims in one dump")
            fh.write(struct.pack("<I", len(desc.cells)))
            for cell, bits in zip(desc.cells, desc.bits):
                fh.write(struct.pack("<I", int(cell)))
                packed = np.packbits(bits > 0, bitorder="little")
                fh.write(packed.tobytes())


def load_descriptors(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError("not a descriptor dump")
        version, d, count = struct.unpack("<III", fh.read(12))
        if version != 1:
            raise ValueError(f"unsupported dump version {version}")
        nbytes = (d + 7) // 8
        out = []
        for _ in range(count):
            (ncells,) = struct.unpack("<I", fh.read(4))
            cells = np.empty(ncells, dtype=np.int32)
            bits = np.empty((ncells, d), dtype=np.int8)
            for row in range(ncells):
                (cells[row],) = struct.unpack("<I", fh.read(4))
                raw = np.frombuffer(fh.read(nbytes), dtype=np.uint8)
                unpacked = np.unpackbits(raw, bitorder="little")[:d]
                bits[row] = np.where(unpacked > 0, 1, -1)
            out.append(AsmkDescriptor(cells=cells, bits=bits))
        return out
