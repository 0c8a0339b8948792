"""Pairwise consistency graph over per-image latents.

Nodes are image latents, edges are two-image grid generations. Small sets
get the complete graph; larger sets cap each node's degree so the edge count
stays linear in the set size, which is what keeps per-image runtime flat.
Capped random wiring can come out disconnected, so construction repairs
connectivity with bridging edges, swapping cycle edges when endpoints are
degree-saturated so the cap is never exceeded.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
import torch

HORIZONTAL = "horizontal"
VERTICAL = "vertical"

EdgeKey = tuple[int, int]


@dataclass(frozen=True)
class ConsistencyGraph:
    n: int
    edges: tuple[EdgeKey, ...]
    degree_cap: int
    seed: int
    orientation: str = HORIZONTAL

    def __post_init__(self):
        for i, j in self.edges:
            if i == j:
                raise ValueError("self loops are not allowed")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) outside node range 0..{self.n - 1}")

    @property
    def nodes(self) -> range:
        return range(self.n)

    def degree(self, node: int) -> int:
        return sum(1 for e in self.edges if node in e)

    def incident(self, node: int) -> tuple[EdgeKey, ...]:
        return tuple(e for e in self.edges if node in e)

    def is_connected(self) -> bool:
        return _is_connected(self.n, set(self.edges))

    def to_manifest(self) -> dict:
        return {
            "nodes": self.n,
            "edges": [list(e) for e in self.edges],
            "degree_cap": self.degree_cap,
            "seed": self.seed,
            "orientation": self.orientation,
        }


def _is_connected(n: int, edges: set[EdgeKey], nodes: Sequence[int] | None = None) -> bool:
    nodes = list(nodes) if nodes is not None else list(range(n))
    if len(nodes) <= 1:
        return True
    adj: dict[int, set[int]] = {v: set() for v in nodes}
    node_set = set(nodes)
    for i, j in edges:
        if i in node_set and j in node_set:
            adj[i].add(j)
            adj[j].add(i)
    seen = {nodes[0]}
    stack = [nodes[0]]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(nodes)


def _components(n: int, edges: set[EdgeKey]) -> list[list[int]]:
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    comps: dict[int, list[int]] = {}
    for v in range(n):
        comps.setdefault(find(v), []).append(v)
    # ordered by smallest member
    return [sorted(c) for _, c in sorted(comps.items())]


def _non_bridge_edge(edges: set[EdgeKey], component: list[int]) -> EdgeKey:
    """Lexicographically first edge inside the component whose removal keeps it connected."""
    comp = set(component)
    for e in sorted(edges):
        if e[0] in comp and e[1] in comp:
            if _is_connected(0, edges - {e}, component):
                return e
    raise RuntimeError("internal invariant violation: saturated component without a cycle")


def build_graph(n: int, degree_cap: int = 4, seed: int = 0) -> ConsistencyGraph:
    """Build the consistency graph: complete for n <= cap+1, degree-capped random otherwise.

    Deterministic given the seed. Raises for n < 2, cap < 1, and the
    unsatisfiable cap=1 with n >= 3 (no connected graph exists under that cap).
    """
    if n < 2:
        raise ValueError(f"need at least 2 images, got n={n}")
    if degree_cap < 1:
        raise ValueError(f"degree_cap must be >= 1, got {degree_cap}")
    if degree_cap == 1 and n > 2:
        raise ValueError("degree_cap=1 cannot produce a connected graph for n >= 3")
    if n <= degree_cap + 1:
        edges = tuple((i, j) for i in range(n) for j in range(i + 1, n))
        return ConsistencyGraph(n=n, edges=edges, degree_cap=degree_cap, seed=seed)

    rng = np.random.default_rng(seed)
    edges: set[EdgeKey] = set()
    deg = [0] * n
    for i in range(n):
        want = degree_cap - deg[i]
        if want <= 0:
            continue
        eligible = [
            j
            for j in range(n)
            if j != i and deg[j] < degree_cap and (min(i, j), max(i, j)) not in edges
        ]
        if not eligible:
            continue
        picked = rng.choice(len(eligible), size=min(want, len(eligible)), replace=False)
        for k in sorted(int(p) for p in picked):
            j = eligible[k]
            edges.add((min(i, j), max(i, j)))
            deg[i] += 1
            deg[j] += 1

    # connectivity repair: bridge components, degree-preserving swaps when saturated
    comps = _components(n, edges)
    while len(comps) > 1:
        a, b = comps[0], comps[1]
        a_free = next((v for v in a if deg[v] < degree_cap), None)
        b_free = next((v for v in b if deg[v] < degree_cap), None)
        if a_free is not None and b_free is not None:
            edges.add((min(a_free, b_free), max(a_free, b_free)))
            deg[a_free] += 1
            deg[b_free] += 1
        elif a_free is not None:  # b saturated: open a slot on a cycle edge of b
            u, v = _non_bridge_edge(edges, b)
            edges.remove((u, v))
            edges.add((min(a_free, u), max(a_free, u)))
            deg[v] -= 1
            deg[a_free] += 1
        elif b_free is not None:
            u, v = _non_bridge_edge(edges, a)
            edges.remove((u, v))
            edges.add((min(b_free, u), max(b_free, u)))
            deg[v] -= 1
            deg[b_free] += 1
        else:  # both saturated: cross-splice two cycle edges
            u1, v1 = _non_bridge_edge(edges, a)
            u2, v2 = _non_bridge_edge(edges, b)
            edges.remove((u1, v1))
            edges.remove((u2, v2))
            edges.add((min(u1, u2), max(u1, u2)))
            edges.add((min(v1, v2), max(v1, v2)))
        comps = _components(n, edges)

    return ConsistencyGraph(
        n=n, edges=tuple(sorted(edges)), degree_cap=degree_cap, seed=seed
    )


@dataclass(frozen=True)
class NodeLatent:
    id: int
    z: torch.Tensor
    timestep: int


@dataclass(frozen=True)
class EdgeLatent:
    pair: EdgeKey
    z: torch.Tensor
    orientation: str
    timestep: int


def choose_orientation(height: int, width: int) -> str:
    """Grid axis from image aspect ratio: wide-or-square images stack horizontally."""
    return HORIZONTAL if width >= height else VERTICAL


def make_edge_latent(z_i: NodeLatent, z_j: NodeLatent, orientation: str) -> EdgeLatent:
    if z_i.z.shape != z_j.z.shape:
        raise ValueError(f"latent shape mismatch: {tuple(z_i.z.shape)} vs {tuple(z_j.z.shape)}")
    if z_i.timestep != z_j.timestep:
        raise ValueError(f"timestep mismatch: {z_i.timestep} vs {z_j.timestep}")
    if orientation == HORIZONTAL:
        z = torch.cat([z_i.z, z_j.z], dim=2)
    elif orientation == VERTICAL:
        z = torch.cat([z_i.z, z_j.z], dim=1)
    else:
        raise ValueError(f"unknown orientation {orientation!r}")
    return EdgeLatent(pair=(z_i.id, z_j.id), z=z, orientation=orientation, timestep=z_i.timestep)


def split_edge_latent(edge: EdgeLatent) -> tuple[NodeLatent, NodeLatent]:
    axis = 2 if edge.orientation == HORIZONTAL else 1
    size = edge.z.shape[axis]
    assert size % 2 == 0, "edge latents are exact concatenations, size is always even"
    half_i, half_j = torch.split(edge.z, size // 2, dim=axis)
    i, j = edge.pair
    return (
        NodeLatent(id=i, z=half_i, timestep=edge.timestep),
        NodeLatent(id=j, z=half_j, timestep=edge.timestep),
    )


def consolidate(versions: Mapping[int, Sequence[NodeLatent]]) -> dict[int, NodeLatent]:
    """Average the per-edge versions of every node latent back into one per node.

    Callers supply versions in ascending edge order, which pins the float
    summation order and makes runs bit-reproducible.
    """
    out: dict[int, NodeLatent] = {}
    for node_id, vs in versions.items():
        if len(vs) == 0:
            raise RuntimeError(
                f"internal invariant violation: node {node_id} has no latent versions "
                "(graph must be connected)"
            )
        shape, t = vs[0].z.shape, vs[0].timestep
        for v in vs:
            if v.z.shape != shape or v.timestep != t:
                raise ValueError(f"inconsistent versions for node {node_id}")
        out[node_id] = NodeLatent(id=node_id, z=torch.stack([v.z for v in vs]).mean(dim=0), timestep=t)
    return out
