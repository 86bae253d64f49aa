"""Pose graph of relative motions; spanning-subgraph sampling and confirmation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import GraphDisconnected, NotSpanning, TooFewEdges
from .motion import Motion2D
from .pairwise import RelativeMotionEstimate

DEFAULT_KAPPA = 0.1
DEFAULT_D_THR_MOTION = 0.5


@dataclass
class PoseGraph:
    n_maps: int
    edges: list[RelativeMotionEstimate] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.edges:
            if not 0 <= e.i < e.j < self.n_maps:
                raise ValueError(f"edge ({e.i}, {e.j}) out of range for {self.n_maps} maps")
            if (e.i, e.j) in seen:
                raise ValueError(f"duplicate edge ({e.i}, {e.j})")
            seen.add((e.i, e.j))


@dataclass
class McsResult:
    global_motions: list[Motion2D]
    reliable_edges: list[RelativeMotionEstimate]
    support: int
    tree_edges: list[RelativeMotionEstimate]
    support_history: list[int] = field(default_factory=list, repr=False)

    def classify(self, edge: RelativeMotionEstimate) -> str:
        key = (edge.i, edge.j)
        if key in {(e.i, e.j) for e in self.tree_edges}:
            return "tree"
        if key in {(e.i, e.j) for e in self.reliable_edges}:
            return "reliable"
        return "unreliable"


def connectivity_matrix_test(edge_subset: Sequence, n_maps: int) -> bool:
    """True iff every entry of ``(L + L^T + I)^N`` is nonzero, in boolean arithmetic."""
    if n_maps <= 0:
        return True
    a = np.eye(n_maps, dtype=bool)
    for e in edge_subset:
        i, j = (e.i, e.j) if hasattr(e, "i") else e
        a[i, j] = a[j, i] = True
    # repeated squaring reaches A^(2^k) >= A^N; the identity term makes that equal
    power = 1
    g = a
    while power < n_maps:
        g = (g.astype(np.int64) @ g.astype(np.int64)) > 0
        power *= 2
    return bool(g.all())


def connected_components(edges: Sequence, n_maps: int) -> list[list[int]]:
    adj = [[] for _ in range(n_maps)]
    for e in edges:
        i, j = (e.i, e.j) if hasattr(e, "i") else e
        adj[i].append(j)
        adj[j].append(i)
    comp = [-1] * n_maps
    out = []
    for s in range(n_maps):
        if comp[s] >= 0:
            continue
        comp[s] = len(out)
        members, queue = [s], deque([s])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if comp[v] < 0:
                    comp[v] = comp[s]
                    members.append(v)
                    queue.append(v)
        out.append(sorted(members))
    return out


def sample_spanning_edges(graph: PoseGraph, rng: np.random.Generator) -> list[RelativeMotionEstimate] | None:
    """A uniformly random (N-1)-subset of edges, or ``None`` when it does not span."""
    need = graph.n_maps - 1
    if len(graph.edges) < need:
        raise TooFewEdges(f"{len(graph.edges)} edges cannot span {graph.n_maps} maps")
    idx = np.sort(rng.choice(len(graph.edges), size=need, replace=False))
    subset = [graph.edges[k] for k in idx]
    return subset if connectivity_matrix_test(subset, graph.n_maps) else None


def chain_global_motions(tree_edges: Sequence[RelativeMotionEstimate], n_maps: int) -> list[Motion2D]:
    """Compose edge motions outward from map 0 (breadth first)."""
    adj: list[list[tuple[int, Motion2D]]] = [[] for _ in range(n_maps)]
    for e in tree_edges:
        adj[e.i].append((e.j, e.motion))
        adj[e.j].append((e.i, e.motion.inverse()))
    globals_: list[Motion2D | None] = [None] * n_maps
    globals_[0] = Motion2D.identity()
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v, m in adj[u]:
            if globals_[v] is None:
                globals_[v] = globals_[u] @ m
                queue.append(v)
    missing = [k for k, g in enumerate(globals_) if g is None]
    if missing:
        raise NotSpanning(f"maps {missing} are not reached by the tree edges")
    return globals_  # type: ignore[return-value]


def motion_distance(m_hat: Motion2D, m_i: Motion2D, m_j: Motion2D, kappa: float = DEFAULT_KAPPA) -> float:
    """Frobenius distance between ``m_hat`` and ``m_i^-1 m_j``, translations scaled by ``kappa``."""
    a = m_hat.matrix()
    b = (m_i.inverse() @ m_j).matrix()
    a[:2, 2] *= kappa
    b[:2, 2] *= kappa
    return float(np.linalg.norm(a - b))


def _support(edges, globals_, d_thr, kappa) -> list[bool]:
    return [motion_distance(e.motion, globals_[e.i], globals_[e.j], kappa) <= d_thr for e in edges]


def mcs_sample_and_confirm(
    graph: PoseGraph,
    d_thr_motion: float = DEFAULT_D_THR_MOTION,
    rng_seed: int = 0,
    kappa: float = DEFAULT_KAPPA,
    iterations_factor: int = 10,
) -> McsResult:
    """Sample spanning edge subsets, keep the one whose chained globals most edges agree with.

    Runs ``iterations_factor * N^2`` outer iterations, each with up to ``100 N``
    draws to find a spanning subset. Iteration ``k`` draws from its own
    generator seeded by ``(rng_seed, k)``.
    """
    n = graph.n_maps
    if not connectivity_matrix_test(graph.edges, n):
        raise GraphDisconnected(connected_components(graph.edges, n))
    if n == 1:
        return McsResult([Motion2D.identity()], [], 0, [], [0])

    best_support, best_globals, best_tree = -1, None, None
    history = []
    for k in range(iterations_factor * n * n):
        rng = np.random.default_rng([int(rng_seed), k])
        tree = None
        for _ in range(100 * n):
            tree = sample_spanning_edges(graph, rng)
            if tree is not None:
                break
        if tree is not None:
            globals_ = chain_global_motions(tree, n)
            support = sum(_support(graph.edges, globals_, d_thr_motion, kappa))
            if support > best_support:
                best_support, best_globals, best_tree = support, globals_, tree
        history.append(max(best_support, 0))
    if best_globals is None:
        # the full graph is connected, so a spanning tree exists; fall back to BFS
        best_tree = _bfs_tree(graph)
        best_globals = chain_global_motions(best_tree, n)
        best_support = sum(_support(graph.edges, best_globals, d_thr_motion, kappa))

    tree_keys = {(e.i, e.j) for e in best_tree}
    ok = _support(graph.edges, best_globals, d_thr_motion, kappa)
    reliable = [e for e, good in zip(graph.edges, ok) if good or (e.i, e.j) in tree_keys]
    return McsResult(best_globals, reliable, best_support, list(best_tree), history)


def _bfs_tree(graph: PoseGraph) -> list[RelativeMotionEstimate]:
    adj = [[] for _ in range(graph.n_maps)]
    for e in graph.edges:
        adj[e.i].append((e.j, e))
        adj[e.j].append((e.i, e))
    seen, tree, queue = {0}, [], deque([0])
    while queue:
        u = queue.popleft()
        for v, e in adj[u]:
            if v not in seen:
                seen.add(v)
                tree.append(e)
                queue.append(v)
    return tree


def graph_to_dict(graph: PoseGraph, result: McsResult | None = None) -> dict:
    """Debug view: every edge with its motion and classification."""
    return {
        "n_maps": graph.n_maps,
        "edges": [
            dict(e.to_dict(), classification=result.classify(e) if result else None)
            for e in graph.edges
        ],
        "e_best": result.support if result else None,
    }
