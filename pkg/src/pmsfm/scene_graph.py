"""Sparse pair-graph construction from a similarity matrix, plus the
directed camera tree used by the kinematic-chain pose parametrization.

The graph densely connects a set of keyframes chosen by farthest point
sampling and attaches every remaining image to its closest keyframe and its
k nearest neighbours, giving O(N) edges; greedy max-similarity repair edges
restore connectivity when the result splits into components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadCount, Disconnected
from .geometry import Pose

TREE_MODES = ("star", "mst", "hclust-sim", "hclust-corr", "none")


@dataclass
class SceneGraph:
    n: int
    keyframes: list
    edges: set          # unordered pairs stored as (min, max)
    n_repairs: int = 0

    def adjacency(self):
        adj = {i: [] for i in range(self.n)}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        for v in adj.values():
            v.sort()
        return adj

    def is_connected(self):
        if self.n == 0:
            return False
        adj = self.adjacency()
        seen = {0}
        stack = [0]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == self.n


@dataclass
class KinematicTree:
    """Directed parent tree; ``parents`` maps child -> [parent, rel Pose, rel sigma].

    The root's own pose is stored in ``root_pose``.  Mode 'none' keeps every
    camera independent (no parent edges).
    """

    root: int
    parents: dict
    mode: str
    n: int
    root_pose: Pose = None

    def __post_init__(self):
        if self.mode not in TREE_MODES:
            raise ValueError(f"unknown tree mode {self.mode!r}")
        if self.root_pose is None:
            self.root_pose = Pose.identity()

    def node_pose(self, node):
        if node in self.parents:
            return self.parents[node][1]
        return self.root_pose if node == self.root else Pose.identity()

    def depth(self):
        best = 0
        for node in self.parents:
            d = 0
            while node in self.parents:
                node = self.parents[node][0]
                d += 1
            best = max(best, d)
        return best

    def validate(self):
        if self.mode == "none":
            return
        if len(self.parents) != self.n - 1:
            raise ValueError("tree must have exactly N-1 edges")
        if self.root in self.parents:
            raise ValueError("root cannot have a parent")
        for node in self.parents:
            seen = set()
            cur = node
            while cur != self.root:
                if cur in seen:
                    raise ValueError("tree contains a cycle")
                seen.add(cur)
                if cur not in self.parents:
                    raise ValueError("tree does not reach the root")
                cur = self.parents[cur][0]

    def levels(self):
        """Nodes grouped by depth as [(node_ids, parent_ids)], root level first.

        In 'none' mode every camera sits at level zero with no parent.
        """
        if self.mode == "none" or not self.parents:
            return [(np.arange(self.n), None)]
        depth = {self.root: 0}
        pending = dict(self.parents)
        while pending:
            progressed = False
            for child in sorted(pending):
                par = pending[child][0]
                if par in depth:
                    depth[child] = depth[par] + 1
                    del pending[child]
                    progressed = True
            if not progressed:
                raise ValueError("tree is not rooted")
        out = [(np.array([self.root]), None)]
        for lvl in range(1, max(depth.values()) + 1):
            nodes = np.array(sorted(k for k, d in depth.items() if d == lvl))
            pars = np.array([self.parents[k][0] for k in nodes])
            out.append((nodes, pars))
        return out


def _similarity_values(S):
    return S.values if hasattr(S, "values") else np.asarray(S, dtype=float)


def select_keyframes_fps(S, n_keyframes):
    """Greedy farthest point sampling under d(i,j) = 1 - S_ij.

    The seed is the image with the smallest similarity row-sum; each next
    keyframe maximizes the minimum distance to the chosen set; ties resolve
    to the lowest id.  Selecting every image returns ids in ascending order.
    """
    values = _similarity_values(S)
    n = values.shape[0]
    if not 1 <= n_keyframes <= n:
        raise BadCount(f"keyframe count {n_keyframes} outside [1, {n}]")
    if n_keyframes == n:
        return list(range(n))
    dist = 1.0 - values
    seed = int(np.argmin(values.sum(axis=1)))
    chosen = [seed]
    mind = dist[seed].copy()
    while len(chosen) < n_keyframes:
        mind[chosen] = -np.inf
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, dist[nxt])
    return chosen


def _repair_connectivity(n, edges, values):
    """Add greedy max-similarity cross-component edges until connected."""
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in edges:
        parent[find(a)] = find(b)
    repairs = 0
    while True:
        roots = {find(i) for i in range(n)}
        if len(roots) <= 1:
            break
        best = None
        for i in range(n):
            ri = find(i)
            for j in range(i + 1, n):
                if find(j) == ri:
                    continue
                cand = (values[i, j], -i, -j)
                if best is None or cand > best[0]:
                    best = (cand, i, j)
        _, i, j = best
        edges.add((i, j))
        parent[find(i)] = find(j)
        repairs += 1
    return repairs


def build_graph(S, n_keyframes=20, k=10, knn_exclude_keyframes=False) -> SceneGraph:
    """Keyframe clique + closest-keyframe and kNN edges per remaining image.

    kNN candidates include keyframes by default; ``knn_exclude_keyframes``
    restricts them to non-keyframes.  A disconnected result is repaired by
    repeatedly adding the highest-similarity cross-component edge.
    """
    values = _similarity_values(S)
    n = values.shape[0]
    if n < 1:
        raise BadCount("need at least one image")
    if n_keyframes > n:
        raise BadCount(f"keyframe count {n_keyframes} exceeds image count {n}")
    keyframes = select_keyframes_fps(values, n_keyframes)
    kf_set = set(keyframes)
    edges = set()
    for ai, a in enumerate(keyframes):
        for b in keyframes[ai + 1:]:
            edges.add((min(a, b), max(a, b)))
    for img in range(n):
        if img in kf_set:
            continue
        # closest keyframe (ties -> lowest id)
        best_kf = max(sorted(kf_set), key=lambda kf: (values[img, kf], -kf))
        edges.add((min(img, best_kf), max(img, best_kf)))
        # k most similar other images
        cands = [c for c in range(n) if c != img]
        if knn_exclude_keyframes:
            cands = [c for c in cands if c not in kf_set]
        cands.sort(key=lambda c: (-values[img, c], c))
        for c in cands[:k]:
            edges.add((min(img, c), max(img, c)))
    repairs = _repair_connectivity(n, edges, values)
    return SceneGraph(n=n, keyframes=keyframes, edges=edges, n_repairs=repairs)


def build_graph_complete(n) -> SceneGraph:
    edges = {(i, j) for i in range(n) for j in range(i + 1, n)}
    return SceneGraph(n=n, keyframes=list(range(n)), edges=edges)


def build_graph_local_window(n, window) -> SceneGraph:
    """Connect each image to its +-window neighbours in input order."""
    if window < 1:
        raise BadCount("window must be >= 1")
    edges = set()
    for i in range(n):
        for j in range(i + 1, min(n, i + window + 1)):
            edges.add((i, j))
    return SceneGraph(n=n, keyframes=[0] if n else [], edges=edges)


def build_graph_random(n, n_edges, seed) -> SceneGraph:
    """Sample distinct random pairs, then repair connectivity."""
    rng = np.random.default_rng(seed)
    all_pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    n_edges = min(n_edges, len(all_pairs))
    idx = rng.choice(len(all_pairs), size=n_edges, replace=False)
    edges = {all_pairs[i] for i in idx}
    ones = np.ones((n, n))
    repairs = _repair_connectivity(n, edges, ones)
    return SceneGraph(n=n, keyframes=[0] if n else [], edges=edges, n_repairs=repairs)


def retrieval_edge_budget(n, n_keyframes, k):
    """Edge budget of the retrieval strategy for matching pair counts."""
    na = min(n_keyframes, n)
    return na * (na - 1) // 2 + (k + 1) * (n - na)


def build_kinematic_tree(graph: SceneGraph, pair_stats, mode) -> KinematicTree:
    """Camera tree from the scene graph and per-edge weights.

    star: every camera is a child of the first keyframe.  mst: maximum-weight
    spanning tree over the weighted graph edges.  hclust-*: agglomerative
    merging by largest size-normalized inter-cluster weight (ties: smaller
    merged size first, then lowest representative ids); merging attaches the
    higher representative's cluster under the lower one's representative.
    """
    if mode not in TREE_MODES:
        raise ValueError(f"unknown tree mode {mode!r}")
    n = graph.n
    root = graph.keyframes[0] if graph.keyframes else 0
    if mode == "none":
        return KinematicTree(root=root, parents={}, mode=mode, n=n)
    if n == 1:
        return KinematicTree(root=root, parents={}, mode=mode, n=1)
    if not graph.is_connected():
        raise Disconnected("scene graph must be connected to build a tree")

    def fresh(parent_of):
        return {c: [p, Pose.identity(), 1.0] for c, p in parent_of.items()}

    if mode == "star":
        parent_of = {i: root for i in range(n) if i != root}
        return KinematicTree(root=root, parents=fresh(parent_of), mode=mode, n=n)

    if mode == "mst":
        # Kruskal on descending weight; ties -> lexicographically lowest edge
        ranked = sorted(graph.edges, key=lambda e: (-pair_stats[e], e))
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        kept = []
        for e in ranked:
            ra, rb = find(e[0]), find(e[1])
            if ra != rb:
                parent[ra] = rb
                kept.append(e)
        adj = {i: [] for i in range(n)}
        for a, b in kept:
            adj[a].append(b)
            adj[b].append(a)
        parent_of = {}
        stack = [root]
        seen = {root}
        while stack:
            cur = stack.pop()
            for nb in sorted(adj[cur]):
                if nb not in seen:
                    seen.add(nb)
                    parent_of[nb] = cur
                    stack.append(nb)
        return KinematicTree(root=root, parents=fresh(parent_of), mode=mode, n=n)

    # hierarchical clustering (hclust-sim / hclust-corr share the machinery;
    # the caller passes similarities or correspondence counts as pair_stats)
    weight = {}
    for e in graph.edges:
        weight[e] = float(pair_stats[e])
    clusters = {i: {i} for i in range(n)}   # representative -> members
    parent_of = {}
    while len(clusters) > 1:
        reps = sorted(clusters)
        best = None
        for x in range(len(reps)):
            for y in range(x + 1, len(reps)):
                ra, rb = reps[x], reps[y]
                total = 0.0
                for a in clusters[ra]:
                    for b in clusters[rb]:
                        e = (min(a, b), max(a, b))
                        if e in weight:
                            total += weight[e]
                size = len(clusters[ra]) * len(clusters[rb])
                link = total / size
                key = (-link, len(clusters[ra]) + len(clusters[rb]), ra, rb)
                if best is None or key < best[0]:
                    best = (key, ra, rb)
        _, ra, rb = best
        parent_of[rb] = ra
        clusters[ra] |= clusters[rb]
        del clusters[rb]
    final_rep = next(iter(clusters))
    return KinematicTree(root=final_rep, parents=fresh(parent_of), mode=mode, n=n)


# --- line-oriented serialization -------------------------------------

def graph_to_lines(graph: SceneGraph):
    lines = [f"keyframe {k}" for k in graph.keyframes]
    lines += [f"edge {a} {b}" for a, b in sorted(graph.edges)]
    return lines


def graph_from_lines(lines, n):
    keyframes = []
    edges = set()
    for ln, raw in enumerate(lines, 1):
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        parts = raw.split()
        if parts[0] == "keyframe" and len(parts) == 2:
            keyframes.append(int(parts[1]))
        elif parts[0] == "edge" and len(parts) == 3:
            a, b = int(parts[1]), int(parts[2])
            if a == b:
                raise ValueError(f"line {ln}: self-loop")
            edges.add((min(a, b), max(a, b)))
        elif parts[0] == "tree":
            continue  # tree records live in their own file
        else:
            raise ValueError(f"line {ln}: unrecognized record {raw!r}")
    return SceneGraph(n=n, keyframes=keyframes, edges=edges)


def tree_to_lines(tree: KinematicTree):
    return [f"tree {child} {tree.parents[child][0]}" for child in sorted(tree.parents)]


def tree_from_lines(lines, n, mode):
    parents = {}
    for ln, raw in enumerate(lines, 1):
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        parts = raw.split()
        if parts[0] != "tree" or len(parts) != 3:
            raise ValueError(f"line {ln}: unrecognized record {raw!r}")
        parents[int(parts[1])] = [int(parts[2]), Pose.identity(), 1.0]
    children = set(parents)
    roots = [i for i in range(n) if i not in children]
    if len(roots) != 1 and mode != "none":
        raise ValueError("tree must have exactly one root")
    return KinematicTree(root=roots[0] if roots else 0, parents=parents, mode=mode, n=n)
