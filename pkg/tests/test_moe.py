import numpy as np
import pytest

from eva import autograd as ag
from eva.autograd import Tensor
from eva.moe import LoadTracker, MoEAdapter, load_shares, load_stats

from conftest import analytic_grad, numeric_grad, rel_err


def make(d=8, r=2, n=4, k=2, shared=1, seed=0, nonzero_b=True):
    ad = MoEAdapter(d, r, n_routed=n, top_k=k, n_shared=shared, rng=np.random.default_rng(seed))
    if nonzero_b:
        ad.B.data[...] = np.random.default_rng(seed + 1).normal(size=ad.B.shape)
    return ad


def loop_mixture(ad: MoEAdapter, h: np.ndarray) -> np.ndarray:
    """Hand-looped adapter output, one token and one expert at a time."""
    out = np.zeros_like(h)
    A, B, R = ad.A.data, ad.B.data, ad.router.data
    for t in range(h.shape[0]):
        x = h[t]
        for e in range(ad.n_shared):
            out[t] += x @ A[e] @ B[e]
        if ad.n_routed and ad.top_k:
            logits = x @ R
            picked = sorted(range(ad.n_routed), key=lambda i: (-logits[i], i))[: ad.top_k]
            z = np.array([logits[i] for i in picked])
            w = np.exp(z - z.max())
            w /= w.sum()
            for wi, i in zip(w, picked):
                e = ad.n_shared + i
                out[t] += wi * (x @ A[e] @ B[e])
    return out


def test_lora_init_is_a_noop():
    ad = MoEAdapter(16, 4, rng=np.random.default_rng(0))
    h = np.random.default_rng(1).normal(size=(5, 16))
    assert np.array_equal(ad(Tensor(h)).data, np.zeros((5, 16)))
    assert np.abs(ad.A.data).max() <= 1 / np.sqrt(16)
    assert ad.A.shape == (9, 16, 4) and ad.B.shape == (9, 4, 16)


def test_rank_must_be_below_width():
    with pytest.raises(ValueError, match="r="):
        MoEAdapter(8, 8)
    with pytest.raises(ValueError, match="top_k"):
        MoEAdapter(8, 2, n_routed=4, top_k=5)


def test_mixture_matches_hand_loop():
    ad = make(d=8, n=5, k=2)
    h = np.random.default_rng(3).normal(size=(30, 8))
    assert np.max(np.abs(ad(Tensor(h)).data - loop_mixture(ad, h))) < 1e-12


@pytest.mark.parametrize("k,shared", [(0, 1), (1, 1), (4, 0), (3, 2)])
def test_mixture_matches_hand_loop_other_settings(k, shared):
    ad = make(d=8, n=4, k=k, shared=shared)
    h = np.random.default_rng(4).normal(size=(12, 8))
    assert np.max(np.abs(ad(Tensor(h)).data - loop_mixture(ad, h))) < 1e-12


def test_gates_sum_to_one_with_k_positive():
    ad = make(d=8, n=6, k=3)
    ad.router.data[...] = np.random.default_rng(5).normal(size=ad.router.shape)
    gate = ad.route(np.random.default_rng(6).normal(size=(500, 8)))
    assert gate.indices.shape == (500, 3)
    assert np.allclose(gate.weights.sum(axis=-1), 1.0, atol=1e-12)
    assert (gate.weights > 0).all()
    assert gate.indices.min() >= 1 and gate.indices.max() <= 6


def test_route_single_token_and_k_zero():
    ad = make(d=8, n=4, k=1)
    g = ad.route(np.ones(8))
    assert g.indices.shape == (1,) and g.weights.tolist() == [1.0]
    z = make(d=8, n=4, k=0)
    g0 = z.route(np.ones((3, 8)))
    assert g0.indices.shape == (3, 0) and g0.weights.shape == (3, 0)


def test_tied_router_picks_lowest_ids():
    ad = make(d=8, n=4, k=2)
    ad.router.data[...] = 0.0
    g = ad.route(np.ones((2, 8)))
    assert g.indices.tolist() == [[1, 2], [1, 2]]
    assert np.allclose(g.weights, 0.5)


def test_k_zero_leaves_only_shared_expert():
    ad = make(d=8, n=4, k=0)
    h = np.random.default_rng(7).normal(size=(6, 8))
    expected = h @ ad.A.data[0] @ ad.B.data[0]
    assert np.allclose(ad(Tensor(h)).data, expected, atol=1e-13)


def test_single_expert_and_expert_outputs_agree():
    ad = make(d=8, n=3, k=2)
    h = np.random.default_rng(8).normal(size=(2, 5, 8))
    outs = ad.expert_outputs(Tensor(h)).data
    assert outs.shape == (4, 2, 5, 8)
    for i in range(4):
        assert np.allclose(outs[i], ad.single_expert(Tensor(h), i).data, atol=1e-13)


def test_adapter_gradients_match_finite_differences():
    ad = make(d=6, r=2, n=3, k=2)
    ad.router.data[...] = np.random.default_rng(9).normal(size=ad.router.shape)
    h = np.random.default_rng(10).normal(size=(4, 6))
    w = np.random.default_rng(11).normal(size=(4, 6))
    for name in ("A", "B", "router"):
        p = getattr(ad, name)
        base = p.data.copy()

        def f(v, p=p):
            p.data[...] = v
            return float(np.sum(ad(Tensor(h)).data * w))

        num = numeric_grad(f, base)
        p.data[...] = base
        grads = ag.grad(ag.tsum(ad(Tensor(h)) * w), ad.parameters())
        assert rel_err(grads[name], num) < 1e-4, name
    gx = analytic_grad(lambda t: ag.tsum(ad(t) * w), h)
    assert rel_err(gx, numeric_grad(lambda v: float(np.sum(ad(Tensor(v)).data * w)), h)) < 1e-4


def test_load_stats_near_uniform_for_random_router():
    # a router with i.i.d. weights has no preferred expert, so over many
    # isotropic tokens each expert should receive about 1/N of the load
    d, n = 16, 8
    ad = MoEAdapter(d, 4, n_routed=n, top_k=2, rng=np.random.default_rng(12))
    ad.router.data[...] = np.random.default_rng(13).normal(size=(d, n))
    ad.router.data[...] -= ad.router.data.mean(axis=1, keepdims=True)
    shares = load_stats(ad, np.random.default_rng(14).normal(size=(20000, d)))
    assert abs(shares.sum() - 1.0) < 1e-12
    assert np.abs(shares - 1 / n).max() < 0.06


def test_load_stats_errors():
    with pytest.raises(ValueError, match="non-empty"):
        load_stats(make(), np.zeros((0, 8)))
    with pytest.raises(ValueError, match="no routed"):
        load_stats(make(k=0), np.ones((3, 8)))
    with pytest.raises(ValueError):
        load_shares([0, 0, 0])


def test_tracker_counts_per_tag():
    ad = make(d=8, n=4, k=2)
    tr = LoadTracker()
    ad(Tensor(np.random.default_rng(15).normal(size=(10, 8))), tracker=tr, tag="x")
    assert tr.counts["x"].sum() == 20
    assert abs(tr.shares("x").sum() - 1.0) < 1e-12
