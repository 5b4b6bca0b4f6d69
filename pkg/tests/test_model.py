import math

import numpy as np
import pytest

from conftest import make_dataset
from fedrkg.dataset import TrainingBatch
from fedrkg.model import (
    EPS_CLIP,
    ClientState,
    GateParams,
    HyperParams,
    NonFiniteGradientError,
    Population,
    batch_loss,
    bce_loss,
    count_parameters,
    init_client,
    local_train_rec,
    predict,
    rec_gradients,
    sgd_step,
    sigmoid,
)


def client_with(P, e, user_id=0):
    P, e = np.asarray(P, float), np.asarray(e, float)
    return ClientState(user_id, P.copy(), e.copy(), GateParams.zeros(P.shape[1]))


def test_sigmoid_matches_logistic_and_saturates_cleanly():
    x = np.linspace(-30, 30, 101)
    assert np.allclose(sigmoid(x), 1 / (1 + np.exp(-x)), rtol=0, atol=1e-15)
    with np.errstate(all="raise"):
        assert sigmoid(-1000.0) == 0.0 and sigmoid(1000.0) == 1.0


def test_predict_zero_user_is_half():
    c = client_with(np.random.default_rng(0).normal(size=(5, 3)), np.zeros(3))
    assert all(predict(c, i) == 0.5 for i in range(5))


def test_predict_aligned_unit_vectors():
    c = client_with([[1.0, 0.0]], [1.0, 0.0])
    assert predict(c, 0) == pytest.approx(0.7310585786300049, abs=1e-15)


def test_bce_closed_forms():
    assert bce_loss([0.5], [1]) == pytest.approx(math.log(2), abs=1e-15)
    clamped = bce_loss([1.0], [1])
    assert clamped == pytest.approx(-math.log(1 - EPS_CLIP), rel=1e-9)
    assert bce_loss([0.0], [0]) == pytest.approx(clamped, rel=1e-9)
    assert bce_loss([1 - EPS_CLIP], [1]) == pytest.approx(1.0000000494736474e-07, rel=1e-6)


def test_bce_length_mismatch():
    with pytest.raises(ValueError, match="differ in length"):
        bce_loss([0.5, 0.5], [1])


def test_init_clients_share_server_table():
    P_g = np.random.default_rng(1).normal(size=(6, 4))
    a = init_client(6, 4, np.random.default_rng(10), P_g)
    b = init_client(6, 4, np.random.default_rng(11), P_g)
    assert np.array_equal(a.item_emb, b.item_emb) and np.array_equal(a.item_emb, P_g)
    assert not np.array_equal(a.user_emb, b.user_emb)
    assert a.gate.bias == 0
    assert a.item_emb is not P_g
    with pytest.raises(ValueError, match="shape"):
        init_client(5, 4, np.random.default_rng(0), P_g)


def test_single_positive_step_uses_pre_step_values():
    rng = np.random.default_rng(3)
    P, e = rng.normal(size=(4, 3)), rng.normal(size=3)
    c = client_with(P, e)
    eta = 0.3
    r_hat = sigmoid(P[2] @ e)
    sgd_step(c, TrainingBatch(0, np.array([2]), np.array([1.0])), eta)
    assert np.allclose(c.item_emb[2], P[2] - eta * (r_hat - 1) * e, atol=1e-15)
    assert np.allclose(c.user_emb, e - eta * (r_hat - 1) * P[2], atol=1e-15)
    assert np.array_equal(c.item_emb[[0, 1, 3]], P[[0, 1, 3]])


def test_logit_gradient_is_residual():
    # d loss / d logit = r_hat - r, checked by central differences on the logit
    for z, r in [(0.3, 1.0), (-1.2, 0.0), (2.5, 1.0)]:
        h = 1e-5
        num = (bce_loss([sigmoid(z + h)], [r]) - bce_loss([sigmoid(z - h)], [r])) / (2 * h)
        assert num == pytest.approx(float(sigmoid(z)) - r, rel=1e-6)


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(10))
def test_rec_gradients_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m, d = 7, 3
    c = client_with(rng.normal(size=(m, d)), rng.normal(size=d))
    # repeated ids exercise the scatter-add
    batch = TrainingBatch(0, np.array([1, 4, 4, 6, 0]), np.array([1.0, 0.0, 1.0, 0.0, 0.0]))
    gu, rows, gr = rec_gradients(c, batch)
    loss = lambda: batch_loss(c, batch)  # noqa: E731
    assert np.allclose(gu, numeric_grad(loss, c.user_emb), rtol=1e-4, atol=1e-8)
    full = numeric_grad(loss, c.item_emb)
    assert np.allclose(full[rows], gr, rtol=1e-4, atol=1e-8)
    untouched = np.setdiff1d(np.arange(m), rows)
    assert np.all(full[untouched] == 0)


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_nonfinite_gradient_aborts():
    c = client_with([[np.inf, 0.0]], [1.0, 0.0])
    with pytest.raises(NonFiniteGradientError, match="user 0"):
        sgd_step(c, TrainingBatch(0, np.array([0]), np.array([1.0])), 0.1)


def test_local_train_eta_zero_is_noop():
    ds = make_dataset([[0, 2, 5]], [1], [3], m=12)
    c = init_client(12, 4, np.random.default_rng(0), np.random.default_rng(1).normal(size=(12, 4)))
    before = c.copy()
    local_train_rec(c, ds, HyperParams(d=4, eta=0.0, E=2), np.random.default_rng(2))
    assert np.array_equal(c.item_emb, before.item_emb) and np.array_equal(c.user_emb, before.user_emb)


def test_local_train_touches_only_batch_rows_and_not_gate():
    ds = make_dataset([[0, 2]], [1], [3], m=200)
    c = init_client(200, 4, np.random.default_rng(0), np.random.default_rng(1).normal(size=(200, 4)))
    before = c.copy()
    hp = HyperParams(d=4, eta=0.5, E=1, neg_per_pos=2)
    rng = np.random.default_rng(9)
    batches = ds.build_batches(0, hp.batch_size, hp.neg_per_pos, np.random.default_rng(9))
    local_train_rec(c, ds, hp, rng)
    seen = np.unique(np.concatenate([b.items for b in batches]))
    changed = np.flatnonzero(np.any(c.item_emb != before.item_emb, axis=1))
    assert set(changed.tolist()) <= set(seen.tolist())
    assert set(changed.tolist()) == set(seen.tolist())
    assert np.array_equal(c.gate.weight, before.gate.weight)


def test_training_lowers_loss():
    ds = make_dataset([[0, 2, 4, 6]], [1], [3], m=30)
    c = init_client(30, 8, np.random.default_rng(0), np.random.default_rng(1).normal(0, 0.1, size=(30, 8)))
    batch = TrainingBatch(0, np.array([0, 2, 4, 6, 9, 11]), np.array([1, 1, 1, 1, 0, 0.0]))
    start = batch_loss(c, batch)
    local_train_rec(c, ds, HyperParams(d=8, eta=0.5, E=30), np.random.default_rng(2))
    assert batch_loss(c, batch) < start


def test_population_views_write_through():
    pop = Population(3, 5, 2)
    c = pop.client(1)
    c.item_emb[0] += 1.0
    c.user_emb += 2.0
    c.gate.bias += 3.0
    c.gate.weight[0] = 4.0
    assert pop.item_emb[1, 0].tolist() == [1.0, 1.0] and pop.user_emb[1].tolist() == [2.0, 2.0]
    assert pop.gate_bias.tolist() == [0.0, 3.0, 0.0] and pop.gate_weight[1, 0] == 4.0
    assert pop.item_emb[0].sum() == 0


def test_parameter_counts_examples():
    assert count_parameters(7957, 32, "steady") == 254_753
    assert count_parameters(7957, 32, "guidance_peak") == 509_377
    assert count_parameters(7957, 32, "inference") == 254_753
    with pytest.raises(ValueError):
        count_parameters(10, 2, "training")


def test_hyperparam_validation():
    assert HyperParams().problems() == []
    probs = HyperParams(beta=1.5, T_int=0, negative_pool="x").problems()
    assert any("beta" in p for p in probs) and any("T_int" in p for p in probs) and any("negative_pool" in p for p in probs)
    assert HyperParams(n_s=5).problems(n_users=3)
