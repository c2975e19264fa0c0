"""Binary clustering trees: generalized-kt recombination and ablation topologies.

Node indices double as pseudojet creation order: leaves occupy ``0..N-1`` in
input order and every merge appends a new node, so the root is always the
last node. The left child of a merge is the pseudojet created earlier.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyInput
from .kinematics import FourMomentum, delta_r2, recombine, to_kinvec


@dataclass(frozen=True)
class Node:
    momentum: FourMomentum
    children: Optional[tuple[int, int]] = None
    leaf_particle: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.children is None


@dataclass(frozen=True)
class ClusterTree:
    nodes: tuple[Node, ...]
    root: int
    n_leaves: int

    def __len__(self) -> int:
        return len(self.nodes)

    def depths(self) -> list[int]:
        """Distance of every node from the root."""
        depth = [0] * len(self.nodes)
        # parents always have larger indices than their children
        for i in range(len(self.nodes) - 1, -1, -1):
            ch = self.nodes[i].children
            if ch is not None:
                depth[ch[0]] = depth[ch[1]] = depth[i] + 1
        return depth

    def heights(self) -> list[int]:
        """Longest path from each node down to a leaf."""
        height = [0] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.children is not None:
                height[i] = 1 + max(height[node.children[0]], height[node.children[1]])
        return height

    def canonical(self, node: Optional[int] = None):
        """Leaf-label-free nested form, insensitive to child order."""
        i = self.root if node is None else node
        n = self.nodes[i]
        if n.children is None:
            return n.momentum
        a = self.canonical(n.children[0])
        b = self.canonical(n.children[1])
        return tuple(sorted((a, b), key=repr))

    def to_json(self) -> dict:
        return {
            "n_leaves": self.n_leaves,
            "root": self.root,
            "nodes": [
                {
                    "p": list(n.momentum),
                    "children": list(n.children) if n.children is not None else None,
                    "leaf": n.leaf_particle,
                }
                for n in self.nodes
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClusterTree":
        nodes = tuple(
            Node(
                FourMomentum(*map(float, d["p"])),
                tuple(d["children"]) if d["children"] is not None else None,
                d["leaf"],
            )
            for d in obj["nodes"]
        )
        return cls(nodes, int(obj["root"]), int(obj["n_leaves"]))


class _Builder:
    def __init__(self, particles: Sequence[FourMomentum]):
        if len(particles) == 0:
            raise EmptyInput("cannot build a tree from zero particles")
        self.nodes = [
            Node(FourMomentum(*map(float, p)), None, i) for i, p in enumerate(particles)
        ]

    def merge(self, a: int, b: int) -> int:
        if a > b:
            a, b = b, a
        p = recombine(self.nodes[a].momentum, self.nodes[b].momentum)
        self.nodes.append(Node(p, (a, b), None))
        return len(self.nodes) - 1

    def finish(self, n_leaves: int) -> ClusterTree:
        return ClusterTree(tuple(self.nodes), len(self.nodes) - 1, n_leaves)


def _pt_weight(pt: float, alpha: float) -> float:
    if alpha == 0.0:
        return 1.0
    if pt == 0.0:
        return math.inf if alpha < 0 else 0.0
    return pt ** (2.0 * alpha)


def _coords(p: FourMomentum, alpha: float) -> tuple[float, float, float]:
    k = to_kinvec(p)
    return _pt_weight(k.pt, alpha), k.eta, k.phi


def _distance(ci, cj, inv_r2: float) -> float:
    # ci belongs to the earlier-created pseudojet; argument order is fixed
    # so the value is bit-identical however it is reached
    w = ci[0] if ci[0] < cj[0] else cj[0]
    return w * delta_r2(ci[1], ci[2], cj[1], cj[2]) * inv_r2


def pair_distance(a: FourMomentum, b: FourMomentum, alpha: float, R: float = 1.0) -> float:
    """Generalized-kt pair distance min(pt_a^2a, pt_b^2a) * dR^2 / R^2."""
    return _distance(_coords(a, alpha), _coords(b, alpha), 1.0 / (R * R))


def cluster(particles: Sequence[FourMomentum], alpha: float = 1.0, R: float = 1.0) -> ClusterTree:
    """Sequential recombination down to a single pseudojet.

    Each active pseudojet caches its nearest neighbour over all others (ties
    to the smallest index). After a merge only entries that pointed at one of
    the two removed pseudojets are rescanned.
    """
    if R <= 0:
        raise ValueError("R must be positive")
    b = _Builder(particles)
    n = len(b.nodes)
    inv_r2 = 1.0 / (R * R)
    coords = [_coords(node.momentum, alpha) for node in b.nodes]
    active = list(range(n))
    nn_idx: dict[int, int] = {}
    nn_dist: dict[int, float] = {}

    def rescan(i: int) -> None:
        best, best_j = math.inf, -1
        ci = coords[i]
        for j in active:
            if j == i:
                continue
            d = _distance(ci, coords[j], inv_r2) if i < j else _distance(coords[j], ci, inv_r2)
            if d < best or best_j < 0:
                best, best_j = d, j
        nn_idx[i] = best_j
        nn_dist[i] = best

    if n > 1:
        for i in active:
            rescan(i)

    while len(active) > 1:
        # smallest index attaining the global minimum, then its cached partner,
        # is the lexicographically smallest minimal pair
        a = active[0]
        dmin = nn_dist[a]
        for i in active:
            if nn_dist[i] < dmin:
                a, dmin = i, nn_dist[i]
        c_ = nn_idx[a]
        lo, hi = (a, c_) if a < c_ else (c_, a)
        new = b.merge(lo, hi)
        coords.append(_coords(b.nodes[new].momentum, alpha))
        active.remove(lo)
        active.remove(hi)
        del nn_idx[lo], nn_idx[hi], nn_dist[lo], nn_dist[hi]

        stale = [i for i in active if nn_idx[i] == lo or nn_idx[i] == hi]
        active.append(new)
        cn = coords[new]
        best, best_j = math.inf, -1
        for i in active[:-1]:
            d = _distance(coords[i], cn, inv_r2)
            if best_j < 0 or d < best:
                best, best_j = d, i
            # the new pseudojet has the largest index, so it only wins strictly
            if d < nn_dist[i]:
                nn_idx[i] = new
                nn_dist[i] = d
        nn_idx[new] = best_j
        nn_dist[new] = best
        for i in stale:
            rescan(i)
    return b.finish(n)


def cluster_oracle(particles: Sequence[FourMomentum], alpha: float = 1.0, R: float = 1.0) -> ClusterTree:
    """Reference clustering: rebuild the full pair table before every merge."""
    if R <= 0:
        raise ValueError("R must be positive")
    b = _Builder(particles)
    n = len(b.nodes)
    inv_r2 = 1.0 / (R * R)
    active = list(range(n))
    while len(active) > 1:
        coords = {i: _coords(b.nodes[i].momentum, alpha) for i in active}
        best = None
        for x in range(len(active)):
            for y in range(x + 1, len(active)):
                i, j = active[x], active[y]
                d = _distance(coords[i], coords[j], inv_r2)
                if best is None or d < best[0] or (d == best[0] and (i, j) < best[1:]):
                    best = (d, i, j)
        _, i, j = best
        new = b.merge(i, j)
        active = [k for k in active if k != i and k != j] + [new]
    return b.finish(n)


def random_tree(particles: Sequence[FourMomentum], seed: int) -> ClusterTree:
    """Merge a uniformly chosen pair of active pseudojets at every step."""
    b = _Builder(particles)
    n = len(b.nodes)
    rng = np.random.default_rng(seed)
    active = list(range(n))
    while len(active) > 1:
        x, y = rng.choice(len(active), size=2, replace=False)
        i, j = active[int(x)], active[int(y)]
        new = b.merge(i, j)
        active = [k for k in active if k != i and k != j] + [new]
    return b.finish(n)


def pt_chain(particles: Sequence[FourMomentum], descending: bool = True) -> ClusterTree:
    """Fully unbalanced chain: leaves sorted by pt, folded from the softest end.

    With ``descending=True`` the hardest particle joins last and sits one
    step below the root.
    """
    b = _Builder(particles)
    n = len(b.nodes)
    pts = [b.nodes[i].momentum.pt for i in range(n)]
    if descending:
        order = sorted(range(n), key=lambda i: (-pts[i], i))
    else:
        order = sorted(range(n), key=lambda i: (pts[i], i))
    acc = order[-1]
    for i in reversed(order[:-1]):
        acc = b.merge(i, acc)
    return b.finish(n)


def pt_desc_chain(particles: Sequence[FourMomentum]) -> ClusterTree:
    return pt_chain(particles, descending=True)


def tree_stats(tree: ClusterTree) -> dict:
    depth = max(tree.depths())
    n = tree.n_leaves
    optimal = math.ceil(math.log2(n)) if n > 1 else 0
    return {
        "depth": depth,
        "n_leaves": n,
        "imbalance": depth / optimal if optimal > 0 else 1.0,
    }


TOPOLOGIES = ("kt", "ca", "antikt", "genkt", "random", "chain", "chain-asc")

_ALPHAS = {"kt": 1.0, "ca": 0.0, "antikt": -1.0}


def build_tree(particles, topology: str = "kt", alpha: float = 1.0, R: float = 1.0, seed: int = 0) -> ClusterTree:
    """Dispatch on a topology name (see ``TOPOLOGIES``)."""
    if topology in _ALPHAS:
        return cluster(particles, _ALPHAS[topology], R)
    if topology == "genkt":
        return cluster(particles, alpha, R)
    if topology == "random":
        return random_tree(particles, seed)
    if topology == "chain":
        return pt_chain(particles, descending=True)
    if topology == "chain-asc":
        return pt_chain(particles, descending=False)
    raise ValueError(f"unknown topology {topology!r}")
