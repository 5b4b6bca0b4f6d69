import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_dataset
from fedrkg.dataset import TrainingBatch
from fedrkg.guidance import (
    GlobalState,
    aggregate_global,
    apply_adaptive_guidance,
    fuse,
    fused_batch_loss,
    gate_forward,
    gate_gradients,
    guidance_vector,
    knowledge_guidance,
    local_train_gate,
    regularized_step,
)
from fedrkg.model import ClientState, GateParams, HyperParams, sigmoid


def rand_client(rng, m, d, gate_scale=1.0):
    return ClientState(
        0,
        rng.normal(size=(m, d)),
        rng.normal(size=d),
        GateParams(rng.normal(scale=gate_scale, size=3 * d), np.array(rng.normal())),
    )


def test_aggregate_identity_and_halves():
    X = np.random.default_rng(0).normal(size=(4, 3))
    assert np.allclose(aggregate_global([X, X, X]), X, atol=1e-15)
    assert np.array_equal(aggregate_global([np.zeros_like(X), 2 * X], [0.5, 0.5]), X)


def test_aggregate_matches_naive_loop():
    rng = np.random.default_rng(1)
    tables = [rng.normal(size=(5, 2)) for _ in range(3)]
    expected = np.zeros((5, 2))
    for i in range(5):
        for j in range(2):
            expected[i, j] = (tables[0][i, j] + tables[1][i, j] + tables[2][i, j]) / 3
    assert np.allclose(aggregate_global(tables), expected, rtol=0, atol=1e-12)


def test_aggregate_errors():
    with pytest.raises(ValueError, match="shape"):
        aggregate_global([np.zeros((2, 2)), np.zeros((3, 2))])
    with pytest.raises(ValueError, match="sum to"):
        aggregate_global([np.zeros((2, 2))] * 2, [0.5, 0.6])
    with pytest.raises(ValueError, match="no client"):
        aggregate_global([])


def test_global_state_counts_reads():
    g = GlobalState(np.zeros((2, 2)))
    g.items()
    g.items()
    assert g.reads == 2


def test_knowledge_guidance_limits():
    rng = np.random.default_rng(2)
    P, G = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    assert np.array_equal(knowledge_guidance(P, G, 1.0), P)
    assert np.array_equal(knowledge_guidance(P, G, 0.0), G)
    assert np.allclose(knowledge_guidance(np.ones((2, 2)), np.zeros((2, 2)), 0.99), 0.99, atol=0)


def test_regularized_step_examples():
    rng = np.random.default_rng(3)
    P, G = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert np.allclose(regularized_step(P, G, 1.0, 0.01), knowledge_guidance(P, G, 0.99), rtol=0, atol=1e-12)
    assert np.array_equal(regularized_step(P, G, 1.0, 0.0), P)
    assert np.allclose(regularized_step(P, G, 2.0, 0.25), knowledge_guidance(P, G, 0.5), rtol=0, atol=1e-12)


finite = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(
    arrays(np.float64, (5, 3), elements=finite),
    arrays(np.float64, (5, 3), elements=finite),
    st.floats(0.0, 1.0),
    st.sampled_from([0.5, 1.0, 2.0]),
)
def test_regularized_step_equivalence_property(P, G, beta, lam):
    eta = (1.0 - beta) / lam
    assert np.allclose(knowledge_guidance(P, G, beta), regularized_step(P, G, lam, eta), rtol=0, atol=1e-12)


def test_gate_zero_params_is_half():
    g = gate_forward(GateParams.zeros(3), np.array([1.0, -2.0, 3.0]), np.array([0.5, 0.5, 9.0]))
    assert g == 0.5


def test_gate_difference_block_only():
    d = 3
    w = np.zeros(3 * d)
    w[2 * d :] = [1.0, -4.0, 2.0]
    p = np.array([0.3, 0.1, -0.7])
    gate = GateParams(w, np.array(0.8))
    assert gate_forward(gate, p, p.copy()) == pytest.approx(float(sigmoid(0.8)), abs=1e-15)


def test_gate_forward_dot_product_oracle():
    rng = np.random.default_rng(4)
    d = 4
    p, pg = rng.normal(size=d), rng.normal(size=d)
    w, b = rng.normal(size=3 * d), rng.normal()
    x = list(p) + list(pg) + [p[k] - pg[k] for k in range(d)]
    z = b + sum(w[k] * x[k] for k in range(3 * d))
    expected = 1.0 / (1.0 + np.exp(-z))
    assert gate_forward(GateParams(w, np.array(b)), p, pg) == pytest.approx(expected, abs=1e-12)


def test_guidance_vector_examples():
    P_gi = np.array([0.2, -1.0, 3.0])
    assert np.array_equal(guidance_vector(0.5, P_gi), P_gi)
    assert np.allclose(guidance_vector(1e-12, P_gi), 0, atol=1e-11)
    assert np.array_equal(guidance_vector(0.75, np.array([0.0, 1.0, 0.0])), [0.0, 1.5, 0.0])


def test_adaptive_with_zero_gate_equals_fixed():
    rng = np.random.default_rng(5)
    c = rand_client(rng, 6, 3)
    c.gate = GateParams.zeros(3)
    P_g = rng.normal(size=(6, 3))
    expected = knowledge_guidance(c.item_emb, P_g, 0.9)
    apply_adaptive_guidance(c, P_g, 0.9)
    assert np.allclose(c.item_emb, expected, rtol=0, atol=1e-12)


def test_adaptive_beta_one_keeps_table():
    rng = np.random.default_rng(6)
    c = rand_client(rng, 4, 2)
    before = c.item_emb.copy()
    apply_adaptive_guidance(c, rng.normal(size=(4, 2)), 1.0)
    assert np.array_equal(c.item_emb, before)


def test_adaptive_matches_per_row_oracle():
    rng = np.random.default_rng(7)
    m, d, beta = 3, 2, 0.7
    c = rand_client(rng, m, d)
    P_g = rng.normal(size=(m, d))
    P = c.item_emb.copy()
    w, b = c.gate.weight, float(c.gate.bias)
    expected = np.empty_like(P)
    for i in range(m):
        x = [P[i, 0], P[i, 1], P_g[i, 0], P_g[i, 1], P[i, 0] - P_g[i, 0], P[i, 1] - P_g[i, 1]]
        g = 1.0 / (1.0 + np.exp(-(sum(wk * xk for wk, xk in zip(w, x)) + b)))
        for k in range(d):
            expected[i, k] = beta * P[i, k] + (1 - beta) * 2 * g * P_g[i, k]
    apply_adaptive_guidance(c, P_g, beta)
    assert np.allclose(c.item_emb, expected, rtol=0, atol=1e-12)


def test_fuse_shapes():
    P = np.ones((4, 2))
    out = fuse(P, 2 * P, np.array([0.0, 0.25, 0.5, 1.0]), 0.5)
    assert np.allclose(out[:, 0], [0.5, 1.0, 1.5, 2.5])


@pytest.mark.parametrize("seed", range(10))
def test_gate_gradients_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m, d, beta = 6, 3, 0.6
    c = rand_client(rng, m, d, gate_scale=0.5)
    P_g = rng.normal(size=(m, d))
    batch = TrainingBatch(0, np.array([0, 2, 2, 5]), np.array([1.0, 0.0, 1.0, 0.0]))
    gw, gb = gate_gradients(c, P_g, batch, beta)
    h = 1e-5
    num_w = np.zeros_like(gw)
    for k in range(3 * d):
        c.gate.weight[k] += h
        up = fused_batch_loss(c, P_g, batch, beta)
        c.gate.weight[k] -= 2 * h
        down = fused_batch_loss(c, P_g, batch, beta)
        c.gate.weight[k] += h
        num_w[k] = (up - down) / (2 * h)
    c.gate.bias += h
    up = fused_batch_loss(c, P_g, batch, beta)
    c.gate.bias -= 2 * h
    down = fused_batch_loss(c, P_g, batch, beta)
    c.gate.bias += h
    assert np.allclose(gw, num_w, rtol=1e-4, atol=1e-9)
    assert gb == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-9)


def gate_setup(eta_gate=0.1, E_gate=3):
    ds = make_dataset([[0, 1, 3, 5]], [2], [4], m=20)
    rng = np.random.default_rng(8)
    c = rand_client(rng, 20, 4, gate_scale=0.1)
    P_g = rng.normal(size=(20, 4))
    hp = HyperParams(d=4, eta_gate=eta_gate, E_gate=E_gate, beta=0.8)
    return ds, c, P_g, hp


def test_gate_training_freezes_recommender():
    ds, c, P_g, hp = gate_setup()
    P0, e0, w0 = c.item_emb.copy(), c.user_emb.copy(), c.gate.weight.copy()
    local_train_gate(c, P_g, ds, hp, np.random.default_rng(0))
    assert np.array_equal(c.item_emb, P0) and np.array_equal(c.user_emb, e0)
    assert not np.array_equal(c.gate.weight, w0)


def test_gate_training_zero_rate_is_noop():
    ds, c, P_g, hp = gate_setup(eta_gate=0.0)
    before = c.copy()
    local_train_gate(c, P_g, ds, hp, np.random.default_rng(0))
    assert np.array_equal(c.gate.weight, before.gate.weight) and c.gate.bias == before.gate.bias
    assert np.array_equal(c.item_emb, before.item_emb)


def test_gate_training_lowers_fused_loss():
    ds, c, P_g, hp = gate_setup(eta_gate=0.05, E_gate=50)
    batch = TrainingBatch(0, np.arange(20), np.isin(np.arange(20), [0, 1, 3, 5]).astype(float))
    start = fused_batch_loss(c, P_g, batch, hp.beta)
    local_train_gate(c, P_g, ds, hp, np.random.default_rng(1))
    assert fused_batch_loss(c, P_g, batch, hp.beta) < start
