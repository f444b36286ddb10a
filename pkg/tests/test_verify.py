import numpy as np
import pytest

from arprl import autodiff as ad
from arprl import verify
from arprl.autodiff import Tensor


def bad_square(a: Tensor) -> Tensor:
    # deliberately wrong backward: d(a^2)/da reported as a instead of 2a
    def back(g):
        return (g * a.data,)
    return ad._make(a.data**2, (a,), back)


def test_gradcheck_catches_wrong_backward():
    a = Tensor(np.random.default_rng(0).uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
    err = ad.gradcheck(lambda: ad.tsum(bad_square(a)), [a])
    assert err == pytest.approx(0.5, abs=1e-6)
    assert err > verify.GRAD_TOL


def test_gradcheck_accepts_correct_square():
    a = Tensor(np.random.default_rng(0).uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
    assert ad.gradcheck(lambda: ad.tsum(a * a), [a]) < 1e-8


def test_relative_error_is_not_absolute():
    assert ad.max_rel_error(np.array([1e-3]), np.array([2e-3])) == pytest.approx(0.5)
    assert ad.max_rel_error(np.array([0.0]), np.array([1e-9])) <= 1e-3


def test_gradient_suite_small():
    res = verify.gradient_suite(instances=3)
    assert {r.name for r in res} == set(verify.PRIMITIVES) | set(verify.LOSSES)
    bad = [r.line() for r in res if not r.passed]
    assert not bad, bad


def test_discrete_mi_suite_passes():
    res = verify.discrete_mi_suite(joints=30)
    assert all(r.passed for r in res), [r.line() for r in res]


def test_bounds_suite_reports_each_form():
    res = {r.name: r for r in verify.bounds_suite(joints=30)}
    assert set(res) == {"utility-privacy", "utility-privacy-groups", "inference-cap"}
    assert res["inference-cap"].passed and res["utility-privacy-groups"].passed


def test_unknown_suite():
    with pytest.raises(ValueError, match="unknown suite"):
        verify.run_suite("nope")


def test_result_line_format():
    assert verify.Result("s", "n", False, "d").line() == "[FAIL] s/n: d"
