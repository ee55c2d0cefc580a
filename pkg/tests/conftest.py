"""Shared helpers: assemble small optimization problems from the synthetic
scene oracle without going through the pipeline module."""

import numpy as np

from pmsfm import scene_graph as sg
from pmsfm import synth
from pmsfm.local_recon import canonicalize_view
from pmsfm.optimizer import SceneState, compile_matches


def make_problem(n_views=5, seed=0, noise=None, tree_mode="hclust-corr",
                 shared_focal=True, freeze_depth=False, rotation_center=True,
                 kind="blobs", delta=8, match_spacing=8, arc_degrees=60.0):
    scene = synth.generate_scene(kind, n_views, seed, noise=noise,
                                 arc_degrees=arc_degrees)
    graph = sg.build_graph_complete(n_views)
    preds = {e: synth.simulate_pair(scene, e, match_spacing=match_spacing)
             for e in sorted(graph.edges)}
    views = [canonicalize_view(graph.edges, preds, v, spacing=delta)
             for v in range(n_views)]
    stats = {e: float(len(preds[e].matches)) for e in graph.edges}
    tree = sg.build_kinematic_tree(graph, stats, tree_mode)
    state = SceneState.from_views(views, tree, scene.width, scene.height, delta,
                                  shared_focal=shared_focal,
                                  freeze_depth=freeze_depth,
                                  rotation_center=rotation_center)
    matchsets = {e: preds[e].matches for e in graph.edges}
    compiled = compile_matches(views, matchsets, scene.width, scene.height, delta)
    return scene, graph, preds, views, tree, state, compiled
