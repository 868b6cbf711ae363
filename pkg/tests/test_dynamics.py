import numpy as np
import pytest

from odesplat.autodiff import ContractError, Graph, NumericError, check_gradient
from odesplat.dynamics import DynamicsField, FieldConfig, SolveConfig, n_steps, ode_solve, rk4_step
from odesplat.nn import bind


def test_zero_field_keeps_state():
    g = np.array([1.0, -2.0])
    np.testing.assert_array_equal(rk4_step(lambda x, t: x * 0.0, g, 0.0, 0.1), g)


def test_constant_field():
    c = np.array([0.5, 2.0])
    np.testing.assert_allclose(rk4_step(lambda x, t: c, np.zeros(2), 0.0, 0.25), 0.25 * c, atol=1e-15)


def test_truncated_exponential():
    assert rk4_step(lambda x, t: x, np.array([1.0]), 0.0, 1.0)[0] == pytest.approx(1 + 1 + 1 / 2 + 1 / 6 + 1 / 24, abs=1e-15)


def test_solve_reaches_e():
    out = ode_solve(lambda x, t: x, np.array([1.0]), 1.0, SolveConfig(step_count=16))
    assert abs(out[0] - np.e) <= 1e-6


def test_t0_is_bitwise_identity():
    g = Graph()
    g0 = g.leaf(np.random.default_rng(0).normal(size=5))
    assert ode_solve(lambda x, t: x * 2.0, g0, 0.0) is g0


def test_convergence_order():
    errs = [abs(ode_solve(lambda x, t: x, np.array([1.0]), 1.0, SolveConfig(step_count=s))[0] - np.e) for s in (8, 16)]
    assert 14 <= errs[0] / errs[1] <= 18


def test_step_count_rule():
    cfg = SolveConfig(step_count=32)
    assert n_steps(1.0, cfg) == 32
    assert n_steps(0.5, cfg) == 16
    assert n_steps(0.01, cfg) == 1


def test_semigroup():
    f = lambda x, t: np.sin(x) - 0.3 * x
    cfg = SolveConfig(step_count=32)
    g0 = np.array([0.3, -1.2, 2.0])
    direct = ode_solve(f, g0, 1.0, cfg)
    split = ode_solve(f, ode_solve(f, g0, 0.5, cfg), 1.0, cfg, t0=0.5)
    np.testing.assert_allclose(split, direct, atol=1e-8)


def test_backward_time_rejected():
    with pytest.raises(ContractError):
        ode_solve(lambda x, t: x, np.ones(1), 0.5, t0=1.0)


def test_blowup_raises_numeric_error():
    with pytest.raises(NumericError):
        ode_solve(lambda x, t: x**4, np.array([1e3]), 1.0, SolveConfig(step_count=1))


@pytest.mark.parametrize("autonomous", [False, True])
def test_field_gradients_through_solver(rng, autonomous):
    field = DynamicsField(4, FieldConfig(width=8, autonomous=autonomous, init_scale=1.0))
    params = field.init(rng)
    name = "ode.field.0.w"

    def loss(w):
        g = w.graph
        p = bind(g, {**params, name: params[name]}, lambda n: False)
        p[name] = w
        gt = ode_solve(field.bind(p), g.constant(np.array([0.1, -0.2, 0.3, 0.05])), 0.7, SolveConfig(step_count=8))
        return (gt * gt).sum()

    assert check_gradient(loss, params[name]) <= 1e-4
