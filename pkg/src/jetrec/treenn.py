"""Recursive jet embeddings over clustering trees.

Two variants share the leaf map ``u_k = act(W_u g(o_k) + b_u)``:

* simple: ``h_k = act(W_h [h_L; h_R; u_k] + b_h)`` at internal nodes;
* gated: reset gates rescale the children before the candidate ``h~_k`` is
  formed, and four update gates (normalized across branches by a blockwise
  softmax) mix ``h~_k``, ``h_L``, ``h_R`` and ``u_k``.

Leaves always emit ``u_k``. The jet embedding is the root activation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .clustering import ClusterTree
from .errors import DimMismatch
from .kinematics import N_FEATURES, node_features

SIMPLE_KEYS = ("W_u", "b_u", "W_h", "b_h")
GATED_KEYS = SIMPLE_KEYS + ("W_r", "b_r", "W_z", "b_z")
GATE_INPUTS = ("default", "candidate")


@dataclass
class RecNNParams:
    q: int
    f: int
    gated: bool
    arrays: dict[str, np.ndarray]
    activation: str = "relu"
    # "default": update gates read [h_L; h_R; u_k; 0]; "candidate": [h~_k; h_L; h_R; u_k]
    gate_input: str = "default"

    def shapes(self) -> dict[str, tuple]:
        return param_shapes(self.q, self.f, self.gated)

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def validate(self) -> None:
        want = self.shapes()
        if set(self.arrays) != set(want):
            raise DimMismatch(f"expected arrays {sorted(want)}, got {sorted(self.arrays)}")
        for k, shp in want.items():
            if self.arrays[k].shape != shp:
                raise DimMismatch(f"{k}: expected shape {shp}, got {self.arrays[k].shape}")
        if self.gate_input not in GATE_INPUTS:
            raise ValueError(f"gate_input must be one of {GATE_INPUTS}")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def param_shapes(q: int, f: int, gated: bool) -> dict[str, tuple]:
    shapes = {"W_u": (q, f), "b_u": (q,), "W_h": (q, 3 * q), "b_h": (q,)}
    if gated:
        shapes.update({"W_r": (3 * q, 3 * q), "b_r": (3 * q,), "W_z": (4 * q, 4 * q), "b_z": (4 * q,)})
    return shapes


def glorot(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_out, fan_in = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(
    q: int,
    f: int = N_FEATURES,
    seed: int = 0,
    gated: bool = False,
    activation: str = "relu",
    gate_input: str = "default",
) -> RecNNParams:
    if q < 1 or f < 1:
        raise ValueError("q and f must be >= 1")
    rng = np.random.default_rng(seed)
    arrays = {}
    for k, shp in param_shapes(q, f, gated).items():
        arrays[k] = glorot(rng, shp) if len(shp) == 2 else np.zeros(shp)
    p = RecNNParams(q, f, gated, arrays, activation, gate_input)
    p.validate()
    return p


def tree_features(tree: ClusterTree) -> np.ndarray:
    """Raw feature rows for every node, in node-index order."""
    jet = tree.nodes[tree.root].momentum
    return np.stack([node_features(n.momentum, jet) for n in tree.nodes])


# cells -------------------------------------------------------------------------

def _leaf_map(w, act, g):
    return act(ad.matvec(w["W_u"], g) + w["b_u"])


def _simple_cell(w, act, h_l, h_r, u):
    return act(ad.matvec(w["W_h"], ad.concat([h_l, h_r, u])) + w["b_h"])


def _gated_cell(w, act, q, gate_input, h_l, h_r, u):
    children = ad.concat([h_l, h_r, u])
    r = ad.sigmoid(ad.matvec(w["W_r"], children) + w["b_r"])
    h_tilde = act(ad.matvec(w["W_h"], r * children) + w["b_h"])
    if gate_input == "candidate":
        z_in = ad.concat([h_tilde, h_l, h_r, u])
    else:
        z_in = ad.concat([children, np.zeros(children.shape[:-1] + (q,))])
    z = ad.blockwise_softmax(ad.matvec(w["W_z"], z_in) + w["b_z"], 4)
    z_h, z_l, z_r, z_n = (ad.slice_(z, i * q, (i + 1) * q) for i in range(4))
    return z_h * h_tilde + z_l * h_l + z_r * h_r + z_n * u


def _cell(params: RecNNParams, w):
    act = ad.ACTIVATIONS[params.activation]
    if params.gated:
        return lambda h_l, h_r, u: _gated_cell(w, act, params.q, params.gate_input, h_l, h_r, u)
    return lambda h_l, h_r, u: _simple_cell(w, act, h_l, h_r, u)


def _check_features(params: RecNNParams, features: np.ndarray, n_nodes: int) -> None:
    if features.shape != (n_nodes, params.f):
        raise DimMismatch(f"features {features.shape} do not match ({n_nodes}, {params.f})")


# per-tree recursion ----------------------------------------------------------------

def embed_tree_var(tape: ad.Tape, w: dict, params: RecNNParams, tree: ClusterTree, features=None) -> ad.Var:
    """Node-by-node forward on ``tape``; returns the root embedding."""
    if features is None:
        features = tree_features(tree)
    _check_features(params, features, len(tree.nodes))
    act = ad.ACTIVATIONS[params.activation]
    cell = _cell(params, w)
    h: list[ad.Var] = []
    # children precede parents in node order
    for k, node in enumerate(tree.nodes):
        u = _leaf_map(w, act, tape.const(features[k]))
        if node.children is None:
            h.append(u)
        else:
            h.append(cell(h[node.children[0]], h[node.children[1]], u))
    return h[tree.root]


def _embed(tree, params, features, gated):
    params.validate()
    if params.gated != gated:
        raise DimMismatch(f"params are {'gated' if params.gated else 'simple'}")
    tape = ad.Tape()
    w = {k: tape.const(v) for k, v in params.arrays.items()}
    return embed_tree_var(tape, w, params, tree, features).value


def embed_simple(tree: ClusterTree, params: RecNNParams, features=None) -> np.ndarray:
    return _embed(tree, params, features, gated=False)


def embed_gated(tree: ClusterTree, params: RecNNParams, features=None) -> np.ndarray:
    return _embed(tree, params, features, gated=True)


def embed(tree: ClusterTree, params: RecNNParams, features=None) -> np.ndarray:
    return _embed(tree, params, features, gated=params.gated)


# level-batched evaluation ------------------------------------------------------------

@dataclass
class LevelSchedule:
    """Height buckets over a batch of trees, leaves first.

    Nodes are numbered globally by concatenating the trees. ``buckets[b]``
    lists the global ids whose subtree height is ``b``; ``left``/``right``
    hold child global ids (-1 at leaves) and ``roots`` one id per tree.
    """

    buckets: list[np.ndarray]
    left: np.ndarray
    right: np.ndarray
    roots: np.ndarray
    features: np.ndarray
    offsets: np.ndarray = field(repr=False)
    bucket_of: np.ndarray = field(repr=False)
    row_of: np.ndarray = field(repr=False)

    @property
    def n_trees(self) -> int:
        return len(self.roots)


def levelize(trees: Sequence[ClusterTree], features: Optional[Sequence[np.ndarray]] = None) -> LevelSchedule:
    if features is None:
        features = [tree_features(t) for t in trees]
    sizes = [len(t.nodes) for t in trees]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    total = int(offsets[-1])
    left = np.full(total, -1, dtype=np.int64)
    right = np.full(total, -1, dtype=np.int64)
    height = np.zeros(total, dtype=np.int64)
    roots = np.empty(len(trees), dtype=np.int64)
    for t, tree in enumerate(trees):
        off = int(offsets[t])
        for k, h in enumerate(tree.heights()):
            height[off + k] = h
            ch = tree.nodes[k].children
            if ch is not None:
                left[off + k] = off + ch[0]
                right[off + k] = off + ch[1]
        roots[t] = off + tree.root
    n_buckets = int(height.max()) + 1 if total else 0
    order = np.argsort(height, kind="stable")
    counts = np.bincount(height, minlength=n_buckets)
    buckets = np.split(order, np.cumsum(counts)[:-1]) if total else []
    row_of = np.empty(total, dtype=np.int64)
    for b in buckets:
        row_of[b] = np.arange(len(b))
    feats = np.concatenate(list(features), axis=0) if total else np.zeros((0, N_FEATURES))
    return LevelSchedule(list(buckets), left, right, roots, feats, offsets, height, row_of)


def embed_batched_var(tape: ad.Tape, w: dict, params: RecNNParams, schedule: LevelSchedule) -> ad.Var:
    if schedule.features.shape[1] != params.f:
        raise DimMismatch(f"feature width {schedule.features.shape[1]} != f={params.f}")
    act = ad.ACTIVATIONS[params.activation]
    cell = _cell(params, w)
    u_all = _leaf_map(w, act, tape.const(schedule.features))
    bucket_of, row_of = schedule.bucket_of, schedule.row_of
    levels: list[ad.Var] = []
    for b, ids in enumerate(schedule.buckets):
        u = ad.gather_rows([u_all], [(0, int(i)) for i in ids])
        if b == 0:
            levels.append(u)
            continue
        lft, rgt = schedule.left[ids], schedule.right[ids]
        h_l = ad.gather_rows(levels, list(zip(bucket_of[lft].tolist(), row_of[lft].tolist())))
        h_r = ad.gather_rows(levels, list(zip(bucket_of[rgt].tolist(), row_of[rgt].tolist())))
        levels.append(cell(h_l, h_r, u))
    r = schedule.roots
    return ad.gather_rows(levels, list(zip(bucket_of[r].tolist(), row_of[r].tolist())))


def embed_batched(schedule: LevelSchedule, params: RecNNParams, variant: Optional[str] = None) -> np.ndarray:
    """Root embeddings of every tree in the schedule, one row per tree."""
    params.validate()
    if variant is not None and (variant == "gated") != params.gated:
        raise DimMismatch(f"variant {variant!r} does not match params")
    tape = ad.Tape()
    w = {k: tape.const(v) for k, v in params.arrays.items()}
    return embed_batched_var(tape, w, params, schedule).value
