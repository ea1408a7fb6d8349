import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gdcaf import autodiff as ad
from gdcaf.gradcheck import model_case, primitive_cases


def test_sum_gives_ones():
    p = ad.Parameter(np.arange(6.0).reshape(2, 3), "p")
    grads = ad.backward(ad.sum_all(p))
    np.testing.assert_array_equal(grads["p"], np.ones((2, 3)))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-10, 10)))
def test_half_square_gives_value(v):
    p = ad.Parameter(v.copy(), "p")
    ad.backward(ad.scale(ad.sum_all(ad.mul(p, p)), 0.5))
    np.testing.assert_allclose(p.grad, v, atol=1e-12)


def test_gradients_accumulate_until_zeroed():
    p = ad.Parameter(np.ones(3), "p")
    ad.backward(ad.sum_all(p))
    ad.backward(ad.sum_all(p))
    np.testing.assert_array_equal(p.grad, 2.0)
    p.zero_grad()
    assert not p.grad.any()


def test_shared_node_gradient_sums_over_uses():
    p = ad.Parameter(np.array([3.0]), "p")
    q = ad.mul(p, p)
    ad.backward(ad.add(q, q))
    assert p.grad[0] == pytest.approx(12.0)


def test_non_scalar_loss_rejected():
    with pytest.raises(ValueError):
        ad.backward(ad.Parameter(np.ones(2), "p") * 2.0)


def test_variable_receives_gradient():
    x = ad.variable(np.array([1.0, -2.0]))
    ad.backward(ad.sum_all(ad.scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_unreached_parameter_untouched():
    p, q = ad.Parameter(np.ones(2), "p"), ad.Parameter(np.ones(2), "q")
    grads = ad.backward(ad.sum_all(p))
    assert "q" not in grads and not q.grad.any()


def test_relu_subgradient_zero_at_kink():
    x = ad.variable(np.array([0.0, 1.0, -1.0]))
    ad.backward(ad.sum_all(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])
    y = ad.variable(np.array([0.0, 1.0, -1.0]))
    ad.backward(ad.sum_all(ad.leaky_relu(y, 0.2)))
    np.testing.assert_allclose(y.grad, [0.2, 1.0, 0.2])


def test_mse_value_and_gradient():
    p = ad.Parameter(np.array([[1.0, 2.0], [3.0, 4.0]]), "p")
    target = np.zeros((2, 2))
    loss = ad.mse(p, target)
    assert loss.value[0] == pytest.approx(7.5)
    ad.backward(loss)
    np.testing.assert_allclose(p.grad, p.value / 2)


def test_mse_known_values():
    p = ad.Parameter(np.ones((3, 3)), "p")
    assert ad.mse(p, np.ones((3, 3))).value[0] == 0.0
    assert ad.mse(p, np.zeros((3, 3))).value[0] == 1.0


def test_mse_matches_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    ref = sum((a[i, j] - b[i, j]) ** 2 for i in range(4) for j in range(5)) / 20
    assert ad.mse(ad.constant(a), b).value[0] == pytest.approx(ref, abs=1e-7)


# -- finite differences --------------------------------------------------------


def test_linear_objective_is_exact():
    rng = np.random.default_rng(1)
    p = ad.Parameter(rng.standard_normal((3, 4)), "p")
    w = rng.standard_normal((3, 4))
    err = ad.finite_diff_check(lambda: ad.sum_all(ad.mul(p, ad.constant(w))), [p])
    assert err < 1e-4


def test_constant_objective_reports_zero():
    p = ad.Parameter(np.ones(3), "p")
    err = ad.finite_diff_check(lambda: ad.sum_all(ad.constant(np.ones(2))), [p])
    assert err == 0.0


def test_wrong_gradient_is_caught():
    # a deliberately broken vjp must be reported
    p = ad.Parameter(np.array([0.5, 1.5]), "p")

    def broken():
        n = ad.Node(p.value**2, (p,), "sq", lambda g: (g * p.value,))
        return ad.sum_all(n)

    assert ad.finite_diff_check(broken, [p]) > 0.4


def test_kink_crossings_are_skipped():
    p = ad.Parameter(np.array([1e-4, 0.5]), "p")
    report = ad.gradient_report(lambda: ad.sum_all(ad.relu(p)), [p], eps=1e-3)
    assert report["skipped_kinks"] == 1
    assert report["checked"] == 1
    assert report["max_rel_error"] < 1e-9


@pytest.mark.parametrize("name", sorted(primitive_cases(np.random.default_rng(0))))
def test_primitive_gradients(name):
    f, params = primitive_cases(np.random.default_rng(0))[name]
    assert ad.finite_diff_check(f, params, eps=1e-3) < 1e-2


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_primitive_gradients_random_seeds(seed):
    for name, (f, params) in primitive_cases(np.random.default_rng(seed)).items():
        assert ad.finite_diff_check(f, params, eps=1e-3) < 1e-2, name


def test_full_model_gradient_unpooled():
    f, params = model_case(seed=0, case=1)
    assert ad.finite_diff_check(f, params, eps=1e-3) < 1e-2


@pytest.mark.parametrize("case", [2, 3, 4])
def test_full_model_gradient_pooled(case):
    # 2x2 normalized maps: checked at a smaller step, see gradcheck.run_suite
    f, params = model_case(seed=0, case=case)
    report = ad.gradient_report(f, params, eps=1e-4, max_elements=600, rng=np.random.default_rng(case))
    assert report["max_rel_error"] < 1e-2
    assert report["checked"] > 400
