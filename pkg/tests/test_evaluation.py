import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arprl import evaluation as ev
from arprl.attack import AttackConfig
from arprl.data import gen_circles
from arprl.mi import random_joint
from arprl.nn import Mlp, init_params
from arprl.training import TrainConfig, train


@pytest.fixture(scope="module")
def toy():
    return gen_circles(200, seed=2)


@pytest.fixture(scope="module")
def trained(toy):
    bundle, _ = train(toy, TrainConfig(epochs=2, local_steps=2, pgd_steps=3))
    return bundle


# ---- advantage ---------------------------------------------------------------------

def test_advantage_frequency_example():
    u = np.array([1] * 50 + [0] * 50)
    pred = np.array([1] * 45 + [0] * 5 + [1] * 10 + [0] * 40)
    assert ev.advantage_from_predictions(pred, u) == pytest.approx(0.7, abs=1e-15)


def test_advantage_extremes():
    u = np.array([0, 1, 0, 1, 1])
    assert ev.advantage_from_predictions(u, u) == 1.0
    assert ev.advantage_from_predictions(np.zeros(5, int), u) == 0.0


def test_advantage_errors():
    with pytest.raises(ev.EvaluationError):
        ev.advantage_from_predictions(np.array([0, 1, 2]), np.array([0, 1, 2]))
    with pytest.raises(ev.EvaluationError):
        ev.advantage_from_predictions(np.array([0, 1]), np.array([1, 1]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=2, max_size=60))
def test_advantage_is_tv_distance(pairs):
    pred, u = map(np.array, zip(*pairs))
    if len(set(u.tolist())) < 2:
        return
    # direct TV between the two conditional prediction histograms
    p0 = np.bincount(pred[u == 0], minlength=2) / np.sum(u == 0)
    p1 = np.bincount(pred[u == 1], minlength=2) / np.sum(u == 1)
    tv = 0.5 * np.abs(p0 - p1).sum()
    assert ev.advantage_from_predictions(pred, u) == pytest.approx(tv, abs=1e-12)
    assert 0.0 <= ev.advantage_from_predictions(pred, u) <= 1.0


# ---- Lipschitz -----------------------------------------------------------------------

def test_spectral_norm_diag():
    assert ev.spectral_norm(np.diag([5.0, 1.0])) == pytest.approx(5.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_spectral_norm_matches_svd(seed):
    w = np.random.default_rng(seed).normal(size=(7, 4))
    assert ev.spectral_norm(w) == pytest.approx(np.linalg.svd(w, compute_uv=False)[0], rel=1e-7)


def test_lipschitz_bound_dominates_empirical_slopes():
    rng = np.random.default_rng(0)
    head = Mlp([3, 8, 2])
    init_params(head, 4)
    bound = ev.estimate_lipschitz(head)
    a, b = rng.normal(size=(500, 3)), rng.normal(size=(500, 3))
    slopes = np.linalg.norm(head.predict(a) - head.predict(b), axis=1) / np.linalg.norm(a - b, axis=1)
    assert slopes.max() <= bound


# ---- privacy cap ----------------------------------------------------------------------

def test_privacy_cap_values():
    assert ev.privacy_cap(1.0) == pytest.approx(1 - 1 / (2 * math.log2(6)), abs=1e-15)
    assert ev.privacy_cap(1.0) == pytest.approx(0.8066, abs=1e-4)
    assert ev.privacy_cap(0.0) == 1.0
    assert ev.privacy_cap(1e-12) > 0.999999


def test_label_gap():
    y = np.array([1, 1, 0, 0, 1, 0])
    u = np.array([0, 0, 0, 1, 1, 1])
    assert ev.label_gap(y, u) == pytest.approx(abs(2 / 3 - 1 / 3))


# ---- discrete oracle ---------------------------------------------------------------------

def test_independent_uniform_attribute():
    p = np.zeros((2, 2, 2))
    p[:, 0, :] = 0.25  # z and u independent, y fixed
    rep = ev.check_bounds_discrete_oracle(p)
    assert rep.h_u_given_z_bits == pytest.approx(1.0, abs=1e-15)
    t5 = rep.check("inference-cap")
    assert t5.lhs == pytest.approx(0.5) and t5.rhs == pytest.approx(0.8066, abs=1e-4) and t5.holds


def test_deterministic_attribute():
    p = np.zeros((2, 2, 2))
    p[0, 0, 0] = p[1, 1, 1] = 0.5  # z = u = y
    rep = ev.check_bounds_discrete_oracle(p)
    assert rep.h_u_given_z_bits == 0.0
    assert rep.check("inference-cap").lhs == 1.0 and rep.check("inference-cap").rhs == 1.0
    assert rep.advantage == 1.0


def test_overall_risk_form_can_fail_while_group_sum_holds():
    # z independent of u, y = u: the best classifier risks 1/2 while the gap is 1 and Adv is 0
    p = np.zeros((2, 2, 2))
    for z in (0, 1):
        for u in (0, 1):
            p[z, u, u] = 0.25
    rep = ev.check_bounds_discrete_oracle(p)
    assert rep.advantage == 0.0 and rep.delta_y_u == 1.0
    assert rep.check("utility-privacy").lhs == pytest.approx(0.5)
    assert not rep.check("utility-privacy").holds
    assert rep.check("utility-privacy-groups").holds


@pytest.mark.parametrize("seed", range(10))
def test_enumeration_matches_closed_forms(seed):
    rng = np.random.default_rng(seed)
    nz = int(rng.integers(2, 9))
    p = random_joint(rng, (nz, 2, 2), concentration=1.0)
    rep = ev.check_bounds_discrete_oracle(p)
    p_zu = p.sum(axis=1)
    bayes = p_zu.max(axis=1).sum()
    tv = 0.5 * np.abs(p_zu[:, 0] / p_zu[:, 0].sum() - p_zu[:, 1] / p_zu[:, 1].sum()).sum()
    assert rep.check("inference-cap").lhs == pytest.approx(bayes, abs=1e-12)
    assert rep.advantage == pytest.approx(tv, abs=1e-12)
    assert rep.check("inference-cap").holds


def test_discrete_oracle_rejects_large_alphabet():
    with pytest.raises(ev.EvaluationError, match="too large"):
        ev.check_bounds_discrete_oracle(np.full((9, 2, 2), 1 / 36))


def test_theorem_check_flags():
    c = ev.TheoremCheck("t", lhs=0.3, rhs=0.3 + 5e-10, kind="lower", mode="exact")
    assert c.holds
    assert not ev.TheoremCheck("t", 0.3, 0.31, "lower", "exact").holds
    assert ev.TheoremCheck("t", 0.3, 0.31, "upper", "exact").holds


# ---- probes and end-to-end metrics -----------------------------------------------------

def test_probe_on_constant_features_hits_majority_rate():
    rng = np.random.default_rng(0)
    u = (rng.random(400) < 0.7).astype(int)
    head = ev.fit_probe(np.zeros((400, 2)), u, 2, seed=1)
    assert ev.accuracy(head, np.zeros((400, 2)), u) == pytest.approx(np.mean(u == np.bincount(u).argmax()))


def test_probe_on_raw_circles_learns_label(toy):
    x, y, _ = toy.split("train")
    head = ev.fit_probe(x, y, 2, seed=0)
    xt, yt, _ = toy.split("test")
    assert ev.accuracy(head, xt, yt) >= 0.97


def test_probe_rejects_single_class():
    with pytest.raises(ev.EvaluationError, match="single"):
        ev.fit_probe(np.zeros((10, 2)), np.ones(10, int), 2)


def test_zero_budget_robust_equals_test(trained, toy):
    m = ev.evaluate(trained, toy, AttackConfig(epsilon=0.0)).metrics
    assert m.robust_acc == m.test_acc
    assert m.gap == pytest.approx(m.infer_acc - m.majority)
    for v in (m.test_acc, m.robust_acc, m.infer_acc, m.advantage):
        assert 0.0 <= v <= 1.0


def test_rv_zero_budget_is_zero(trained, toy):
    rv = ev.estimate_rv(trained, toy, AttackConfig(epsilon=0.0), critic_steps=200)
    assert abs(rv["rv"]) < 0.1


def test_rv_constant_representation(toy):
    bundle, _ = train(toy, TrainConfig(epochs=1, local_steps=1, pgd_steps=1))
    for w in bundle.f.weights + bundle.f.biases:
        w.data[:] = 0.0
    rv = ev.estimate_rv(bundle, toy, AttackConfig(epsilon=0.05), critic_steps=200)
    assert abs(rv["rv"]) < 0.1
    # negatives are drawn from the marginal of x, so with constant z the clean
    # estimate tracks I(x; u), which is at most H(u) = log 2 on circles
    assert -0.1 < rv["mi_clean"] <= math.log(2) + 0.1


def test_bound_report_structure(trained, toy):
    rep = ev.check_theorem_bounds(trained, toy, AttackConfig(), critic_steps=200)
    assert [c.name for c in rep.checks] == ["robustness-vulnerability", "utility-privacy",
                                            "robustness-privacy", "inference-cap"]
    assert 0.0 <= rep.delta_y_u <= 1.0 and rep.R >= 0.0
    assert 0.0 <= rep.h_u_given_z_bits <= 1.0
    assert all(c.mode == "estimated" for c in rep.checks)
    assert "inference-cap" in rep.text()


def test_export_projection(trained, toy, tmp_path):
    proj, rep = ev.export_projection(trained, toy, tmp_path / "p.csv")
    lines = proj.read_text().splitlines()
    assert lines[0] == "pc1,pc2,y,u" and len(lines) == 1 + len(toy.test_idx)
    assert rep.read_text().splitlines()[0].startswith("z0,z1")


def test_rv_positive_for_identity_encoder_under_large_budget(toy):
    bundle, _ = train(toy, TrainConfig(epochs=1, local_steps=1, pgd_steps=1))
    # relu(x) - relu(-x) = x through the 2-10-2 encoder
    w1 = np.zeros((2, 10))
    w1[:, :2], w1[:, 2:4] = np.eye(2), -np.eye(2)
    w2 = np.zeros((10, 2))
    w2[:2], w2[2:4] = np.eye(2), -np.eye(2)
    bundle.f.weights[0].data, bundle.f.weights[1].data = w1, w2
    for b in bundle.f.biases:
        b.data[:] = 0.0
    x = toy.x[:5]
    np.testing.assert_allclose(bundle.f.predict(x), x, atol=1e-15)
    rv = ev.estimate_rv(bundle, toy, AttackConfig(epsilon=1.0, steps=10), critic_steps=500)
    assert rv["rv"] > 0
