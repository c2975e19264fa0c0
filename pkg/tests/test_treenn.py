import numpy as np
import pytest

import hp_oracle as hp
from jetrec import autodiff as ad
from jetrec.clustering import cluster, pt_desc_chain, random_tree
from jetrec.datagen import standardize_fit
from jetrec.errors import DimMismatch
from jetrec.treenn import (
    RecNNParams,
    embed,
    embed_batched,
    embed_gated,
    embed_simple,
    embed_tree_var,
    init_params,
    levelize,
    param_shapes,
    tree_features,
)

from conftest import random_jet


def zero_params(q, gated):
    return RecNNParams(q, 7, gated, {k: np.zeros(s) for k, s in param_shapes(q, 7, gated).items()})


def saturate_gates(simple: RecNNParams, rng, boost=40.0) -> RecNNParams:
    """Gated params whose update gate picks h~ and whose reset gate passes everything."""
    q = simple.q
    g = init_params(q, simple.f, seed=int(rng.integers(1 << 31)), gated=True)
    arrays = dict(g.arrays)
    arrays.update({k: simple.arrays[k].copy() for k in ("W_u", "b_u", "W_h", "b_h")})
    arrays["W_r"] = np.zeros((3 * q, 3 * q))
    arrays["b_r"] = np.full(3 * q, boost)
    arrays["W_z"] = np.zeros((4 * q, 4 * q))
    arrays["b_z"] = np.zeros(4 * q)
    arrays["b_z"][:q] += boost
    return RecNNParams(q, simple.f, True, arrays)


def trees_from(rng, n, lo=1, hi=30):
    makers = [lambda p: cluster(p, 1.0), lambda p: cluster(p, -1.0), lambda p: cluster(p, 0.0),
              lambda p: random_tree(p, 5), pt_desc_chain]
    return [makers[i % len(makers)](random_jet(rng, int(rng.integers(lo, hi + 1)))) for i in range(n)]


@pytest.mark.parametrize("gated", [False, True])
def test_zero_params_give_zero_embedding(rng, gated):
    for t in trees_from(rng, 10):
        assert np.array_equal(embed(t, zero_params(4, gated)), np.zeros(4))


def test_constant_propagation(rng):
    c = 0.7
    p = zero_params(5, False)
    p.arrays["b_u"][:] = c
    p.arrays["b_h"][:] = c
    for t in trees_from(rng, 10):
        assert np.array_equal(embed_simple(t, p), np.full(5, c))


def test_gated_all_zero_gates_are_quarter():
    tape = ad.Tape()
    z = ad.blockwise_softmax(tape.const(np.zeros(16)), 4)
    assert np.all(z.value == 0.25)


def test_variant_mismatch(rng):
    t = cluster(random_jet(rng, 4), 1.0)
    with pytest.raises(DimMismatch):
        embed_gated(t, init_params(4, seed=0, gated=False))
    with pytest.raises(DimMismatch):
        embed_simple(t, init_params(4, seed=0, gated=True))
    with pytest.raises(DimMismatch):
        embed_simple(t, init_params(4, f=5, seed=0))


def test_init_params():
    a, b = init_params(8, 7, seed=3), init_params(8, 7, seed=3)
    assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
    assert a.n_params() == 264 == 8 * 7 + 8 + 3 * 64 + 8
    g = init_params(8, 7, seed=3, gated=True)
    for k, v in g.arrays.items():
        if v.ndim == 2:
            bound = np.sqrt(6.0 / sum(v.shape))
            assert np.abs(v).max() <= bound
        else:
            assert not v.any()


def test_leaves_emit_leaf_map(rng):
    p = init_params(6, seed=1, gated=True)
    t = cluster(random_jet(rng, 1), 1.0)
    f = tree_features(t)[0]
    assert np.allclose(embed_gated(t, p), np.maximum(p.arrays["W_u"] @ f + p.arrays["b_u"], 0), rtol=1e-15)


def test_weight_sharing_bit_identical(rng):
    ps = random_jet(rng, 12)
    p = init_params(8, seed=2, gated=True)
    assert np.array_equal(embed(cluster(list(ps), 1.0), p), embed(cluster(list(ps), 1.0), p))


def _ordered_shape(tree, i=None):
    i = tree.root if i is None else i
    n = tree.nodes[i]
    if n.children is None:
        return n.momentum
    return (_ordered_shape(tree, n.children[0]), _ordered_shape(tree, n.children[1]))


def test_embedding_depends_only_on_ordered_tree(rng):
    # permutations that reproduce the same ordered tree give the same embedding
    p = init_params(6, seed=4, gated=True)
    hits = 0
    for _ in range(300):
        ps = random_jet(rng, 5)
        perm = rng.permutation(5)
        t1, t2 = cluster(ps, 1.0), cluster([ps[i] for i in perm], 1.0)
        assert t1.canonical() == t2.canonical()
        if _ordered_shape(t1) == _ordered_shape(t2):
            hits += 1
            assert np.array_equal(embed(t1, p), embed(t2, p))
    assert hits > 20


def test_levelize_examples(rng):
    singles = [cluster(random_jet(rng, 1), 1.0) for _ in range(5)]
    assert len(levelize(singles).buckets) == 1
    chain = pt_desc_chain(random_jet(rng, 8))
    assert len(levelize([chain]).buckets) == 8


def test_levelize_schedule_invariants(rng):
    trees = trees_from(rng, 60)
    s = levelize(trees)
    total = sum(len(t.nodes) for t in trees)
    ids = np.concatenate(s.buckets)
    assert sorted(ids.tolist()) == list(range(total))
    assert len(s.buckets) == 1 + max(max(t.depths()) for t in trees)
    done = np.zeros(total, dtype=bool)
    for b, bucket in enumerate(s.buckets):
        for i in bucket:
            if s.left[i] >= 0:
                assert done[s.left[i]] and done[s.right[i]]
                assert s.bucket_of[s.left[i]] < b and s.bucket_of[s.right[i]] < b
        done[bucket] = True


@pytest.mark.parametrize("gated", [False, True])
def test_batched_equals_per_tree(rng, gated):
    trees = trees_from(rng, 200)
    p = init_params(8, seed=5, gated=gated)
    batched = embed_batched(levelize(trees), p)
    naive = np.stack([embed(t, p) for t in trees])
    assert np.max(np.abs(batched - naive)) <= 1e-12


def test_single_tree_batch(rng):
    t = cluster(random_jet(rng, 9), 1.0)
    p = init_params(8, seed=6, gated=True)
    assert np.max(np.abs(embed_batched(levelize([t]), p)[0] - embed(t, p))) <= 1e-12


def test_batched_with_tanh_and_candidate_gate_input(rng):
    trees = trees_from(rng, 50)
    p = init_params(8, seed=7, gated=True, activation="tanh", gate_input="candidate")
    assert np.max(np.abs(embed_batched(levelize(trees), p) - np.stack([embed(t, p) for t in trees]))) <= 1e-12


def test_gated_reduces_to_simple(rng):
    worst = 0.0
    for i in range(100):
        t = trees_from(rng, 1)[0]
        simple = init_params(8, seed=i)
        gated = saturate_gates(simple, rng)
        worst = max(worst, np.max(np.abs(embed_gated(t, gated) - embed_simple(t, simple))))
    assert worst <= 1e-6


def test_candidate_gate_input_differs_from_default(rng):
    t = cluster(random_jet(rng, 6), 1.0)
    p = init_params(4, seed=8, gated=True)
    p.arrays["b_u"][:] = 0.5
    q = RecNNParams(p.q, p.f, True, p.arrays, gate_input="candidate")
    assert not np.allclose(embed(t, p), embed(t, q))


def _embedding_case(rng, gated, n_leaves, q, seed):
    tree = cluster(random_jet(rng, n_leaves), 1.0)
    raw = tree_features(tree)
    feats = standardize_fit(raw).apply(raw)
    params = init_params(q, seed=seed, gated=gated)
    for k in ("b_u", "b_h", "b_r", "b_z"):
        if k in params.arrays:
            params.arrays[k] = rng.normal(0, 0.3, params.arrays[k].shape)
    proj = rng.normal(size=q)
    return tree, feats, params, proj


def _embedding_hp_error(rng, tree, feats, params, proj):
    def f(tape, w):
        return ad.sum_(embed_tree_var(tape, w, params, tree, feats) * proj)

    _, grads = ad.value_and_grad(f, params.arrays)
    dfeats = [hp.dec(r) for r in feats]
    dproj = hp.dec(proj)
    fwd = hp.Forward()

    def f_dec(darr):
        h = fwd.embed(tree, dfeats, darr, params.gated, params.gate_input)
        return sum((a * b for a, b in zip(h, dproj)), hp.ZERO)

    f_dec(hp.to_decimal_arrays(params.arrays))
    coords = hp.probe_coords(grads, rng, per_array=6)
    return fwd.margin, hp.max_rel_error(f_dec, params.arrays, grads, coords)


@pytest.mark.parametrize("gated,n_leaves", [(False, 5), (True, 7)])
def test_embedding_gradients(rng, gated, n_leaves):
    checked = 0
    for seed in range(12):
        case = _embedding_case(rng, gated, n_leaves, 6, seed)
        margin, err = _embedding_hp_error(rng, *case)
        if margin < 1e-3:
            continue  # too close to a relu kink for a clean difference
        assert err < 1e-5
        checked += 1
    assert checked >= 3


def test_embedding_float64_grad_check_tanh(rng):
    # smooth activation: the plain float64 checker is usable on its own
    tree = cluster(random_jet(rng, 5), 1.0)
    raw = tree_features(tree)
    feats = standardize_fit(raw).apply(raw)
    params = init_params(4, seed=1, gated=True, activation="tanh")
    proj = rng.normal(size=4)

    def f(tape, w):
        return ad.sum_(embed_tree_var(tape, w, params, tree, feats) * proj)

    coords = {k: [int(np.argmax(np.abs(v)))] for k, v in ad.value_and_grad(f, params.arrays)[1].items()}
    assert ad.grad_check(f, params.arrays, coords=coords) < 1e-6
