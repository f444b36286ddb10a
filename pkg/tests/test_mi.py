import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arprl import autodiff as ad
from arprl import mi
from arprl.autodiff import Tensor
from arprl.nn import Mlp, init_params


def identity_net(d):
    net = Mlp([d, d])
    net.weights[0].data = np.eye(d)
    return net


def const_critic(in_dim, c):
    net = Mlp([in_dim, 1])
    net.biases[0].data = np.array([c])
    return net


def small_batch(rng, B=6, d=2):
    return mi.make_batch(rng.normal(size=(B, d)), rng.integers(0, 2, B), rng.integers(0, 2, B), rng)


# ---- L1 ----------------------------------------------------------------------

def test_privacy_loss_uniform_logits_is_log2():
    rng = np.random.default_rng(0)
    batch = small_batch(rng)
    g = Mlp([2, 2])  # zero weights -> uniform logits
    assert float(mi.privacy_loss(g, identity_net(2), batch).data) == pytest.approx(math.log(2), abs=1e-15)


def test_privacy_loss_hand_logits():
    batch = mi.Batch(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]), np.array([0, 0]), np.array([1, 0]))
    val = float(mi.privacy_loss(identity_net(2), identity_net(2), batch).data)
    expected = -math.log(math.e / (math.e + 1))
    assert val == pytest.approx(expected, abs=1e-15)
    assert val == pytest.approx(0.3133, abs=1e-4)


def test_privacy_loss_vanishes_with_large_margin():
    batch = mi.Batch(np.array([[50.0, -50.0], [-50.0, 50.0]]), np.array([0, 1]), np.array([0, 0]), np.array([1, 0]))
    assert float(mi.privacy_loss(identity_net(2), identity_net(2), batch).data) < 1e-40


def test_privacy_loss_rejects_bad_attribute():
    batch = mi.Batch(np.zeros((2, 2)), np.array([0, 2]), np.array([0, 0]), np.array([1, 0]), 3)
    with pytest.raises(ValueError):
        mi.privacy_loss(Mlp([2, 2]), identity_net(2), batch)


def test_privacy_loss_differentiable_in_both_nets():
    rng = np.random.default_rng(1)
    f, g = Mlp([2, 4, 2]), Mlp([2, 3, 2])
    init_params(f, 1)
    init_params(g, 2)
    batch = small_batch(rng)
    params = f.parameters() + g.parameters()
    assert ad.gradcheck(lambda: mi.privacy_loss(g, f, batch), params) < 1e-4


# ---- L2 / L3 ---------------------------------------------------------------------

def test_mine_constant_critic_is_zero():
    batch = small_batch(np.random.default_rng(2))
    val = float(mi.mine_objective(const_critic(2 + 2 + 1, 3.7), identity_net(2), batch).data)
    assert abs(val) < 1e-14


def test_mine_zero_scores_is_zero():
    assert float(mi.dv_bound(Tensor([0.0, 0.0]), Tensor([0.0, 0.0])).data) == 0.0


def test_mine_identity_permutation_is_nonpositive():
    rng = np.random.default_rng(3)
    t = Mlp([5, 8, 1])
    init_params(t, 3)
    x = rng.normal(size=(10, 2))
    batch = mi.Batch(x, rng.integers(0, 2, 10), np.zeros(10, int), np.arange(10))
    assert float(mi.mine_objective(t, identity_net(2), batch).data) <= 1e-15


def test_js_zero_critic():
    batch = small_batch(np.random.default_rng(4))
    val = float(mi.js_objective(const_critic(5, 0.0), identity_net(2), batch).data)
    assert val == pytest.approx(-2 * math.log(2), abs=1e-15)


def test_js_saturates_at_zero():
    val = float(mi.js_bound(Tensor([60.0, 60.0]), Tensor([-60.0, -60.0])).data)
    assert -1e-20 < val <= 0.0


def test_batch_size_errors():
    with pytest.raises(ValueError):
        mi.dv_bound(Tensor([1.0]), Tensor([1.0]))
    with pytest.raises(ValueError):
        mi.js_bound(Tensor([1.0]), Tensor([1.0]))
    with pytest.raises(ValueError):
        mi.Batch(np.zeros((1, 2)), np.zeros(1, int), np.zeros(1, int), np.zeros(1, int))


def test_objectives_finite_for_extreme_scores():
    big = Tensor(np.array([900.0, -900.0, 400.0]))
    assert np.isfinite(mi.dv_bound(big, big).data)
    assert np.isfinite(mi.js_bound(big, big).data)


@pytest.mark.parametrize("which", ["mine", "js"])
def test_objectives_gradcheck(which):
    rng = np.random.default_rng(7)
    f, c = Mlp([3, 4, 2]), Mlp([3 + 2 + 1, 6, 1])
    init_params(f, 1)
    init_params(c, 2)
    batch = small_batch(rng, B=8, d=3)
    fn = mi.mine_objective if which == "mine" else mi.js_objective
    assert ad.gradcheck(lambda: fn(c, f, batch), f.parameters() + c.parameters()) < 1e-4


def test_negatives_are_a_permutation():
    rng = np.random.default_rng(0)
    fixed = []
    for _ in range(200):
        batch = small_batch(rng, B=16)
        assert sorted(map(tuple, batch.xbar)) == sorted(map(tuple, batch.x))
        fixed.append(np.mean(batch.perm == np.arange(16)))
    # a uniform permutation has one fixed point on average
    assert np.mean(fixed) <= 1.0 / 16 + 0.02


# ---- exact oracles ----------------------------------------------------------------

def test_exact_mi_examples():
    assert mi.exact_mi_discrete([[0.25, 0.25], [0.25, 0.25]]) == pytest.approx(0.0, abs=1e-15)
    assert mi.exact_mi_discrete([[0.5, 0.0], [0.0, 0.5]]) == pytest.approx(math.log(2), abs=1e-15)
    # direct double sum over the four cells
    direct = 2 * 0.4 * math.log(0.4 / 0.25) + 2 * 0.1 * math.log(0.1 / 0.25)
    assert mi.exact_mi_discrete([[0.4, 0.1], [0.1, 0.4]]) == pytest.approx(direct, abs=1e-15)
    assert direct == pytest.approx(0.19275, abs=1e-5)


def test_exact_mi_rejects_bad_tables():
    with pytest.raises(ValueError):
        mi.exact_mi_discrete([[0.5, 0.6], [0.0, 0.0]])
    with pytest.raises(ValueError):
        mi.exact_mi_discrete([[-0.1, 0.6], [0.25, 0.25]])


@pytest.mark.parametrize("rho,expected", [(0.0, 0.0), (0.9, 0.830366), (0.5, 0.143841)])
def test_gaussian_mi(rho, expected):
    assert mi.gaussian_mi(rho) == pytest.approx(expected, abs=1e-6)
    assert mi.gaussian_mi(rho) == pytest.approx(-0.5 * math.log(1 - rho**2), abs=1e-15)


def test_gaussian_mi_domain():
    with pytest.raises(ValueError):
        mi.gaussian_mi(1.0)


def test_club_examples():
    assert mi.club_upper_bound_exact([[0.25, 0.25], [0.25, 0.25]]) == pytest.approx(0.0, abs=1e-15)
    assert mi.club_upper_bound_exact([[0.5, 0.0], [0.0, 0.5]], smoothing=1e-9) >= math.log(2)
    table = [[0.4, 0.1], [0.1, 0.4]]
    assert mi.club_upper_bound_exact(table) >= mi.exact_mi_discrete(table)
    with pytest.raises(ValueError, match="zero-probability"):
        mi.club_upper_bound_exact([[0.5, 0.5], [0.0, 0.0]])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.integers(2, 8))
def test_sandwich_property(seed, na, nb):
    rng = np.random.default_rng(seed)
    p = mi.random_joint(rng, (na, nb), concentration=1.0)
    critic = rng.normal(scale=3.0, size=(na, nb))
    exact = mi.exact_mi_discrete(p)
    assert mi.dv_functional_exact(p, critic) <= exact + 1e-12
    assert exact <= mi.club_upper_bound_exact(p) + 1e-12
    assert mi.js_functional_exact(p, critic) <= mi.js_supremum_exact(p) + 1e-12


def test_optimal_critics_attain_the_bounds():
    rng = np.random.default_rng(0)
    p = mi.random_joint(rng, (4, 3), concentration=1.0)
    log_ratio = np.log(p / mi.product_of_marginals(p))
    assert mi.dv_functional_exact(p, log_ratio) == pytest.approx(mi.exact_mi_discrete(p), abs=1e-12)
    assert mi.js_functional_exact(p, log_ratio) == pytest.approx(mi.js_supremum_exact(p), abs=1e-12)


@pytest.mark.parametrize("rho", [0.5, 0.9])
def test_trained_mine_recovers_gaussian_mi(rho):
    rng = np.random.default_rng(11)
    a = rng.standard_normal(10_000)
    b = rho * a + math.sqrt(1 - rho**2) * rng.standard_normal(10_000)
    _, est = mi.train_critic(a, b, kind="mine", steps=2000, seed=5)
    assert abs(est - mi.gaussian_mi(rho)) <= 0.2 * mi.gaussian_mi(rho)


def test_stacked_critic_pass_matches_separate_passes():
    rng = np.random.default_rng(3)
    critic = Mlp([5, 8, 1])
    init_params(critic, 1)
    x, xn, z, ue = rng.normal(size=(6, 2)), rng.normal(size=(6, 2)), rng.normal(size=(6, 2)), rng.normal(size=(6, 1))
    pos, neg = mi.critic_pair_scores(critic, x, xn, z, ue)
    np.testing.assert_allclose(pos.data, mi.critic_scores(critic, x, z, ue).data, rtol=1e-13)
    np.testing.assert_allclose(neg.data, mi.critic_scores(critic, xn, z, ue).data, rtol=1e-13)
