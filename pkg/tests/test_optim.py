import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdpgan.optim import Adam, AdamState, Sgd, adam_step, sgd_step


def test_sgd_example():
    assert sgd_step([np.array(1.0)], [np.array(2.0)], 0.1)[0] == pytest.approx(0.8)


def test_sgd_zero_gradient_is_identity(rng):
    p = [rng.normal(size=(3, 2))]
    assert sgd_step(p, [np.zeros((3, 2))], 0.5)[0].tobytes() == p[0].tobytes()


def test_sgd_quadratic_convergence():
    p = [np.array(1.0)]
    for k in range(200):
        p = sgd_step(p, [p[0]], 0.1)  # grad of p^2 / 2
    assert abs(float(p[0])) < 1e-6
    assert float(p[0]) == pytest.approx(0.9 ** 200, rel=1e-10)


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        sgd_step([np.ones(3)], [np.ones(4)], 0.1)
    with pytest.raises(ValueError):
        sgd_step([np.ones(3)], [], 0.1)
    with pytest.raises(ValueError, match="moments"):
        adam_step([np.ones(3)], [np.ones(3)], AdamState([np.ones(2)], [np.ones(3)]), 0.1)


@given(c=st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3))
def test_adam_first_step_magnitude_is_lr(c):
    p, s = adam_step([np.array([0.0])], [np.array([c])], AdamState.zeros_like([np.zeros(1)]), 0.01)
    assert abs(float(p[0][0])) == pytest.approx(0.01, rel=1e-5)
    assert np.sign(p[0][0]) == -np.sign(c)
    assert s.step == 1


def test_adam_zero_gradient_from_zero_state(rng):
    params = [rng.normal(size=(2, 2))]
    new, _ = adam_step(params, [np.zeros((2, 2))], AdamState.zeros_like(params), 0.1)
    assert new[0].tobytes() == params[0].tobytes()


def test_adam_quadratic_convergence():
    # scalar simulation oracle written out independently
    p_ref, m, v = 1.0, 0.0, 0.0
    p, s = [np.array(1.0)], AdamState.zeros_like([np.array(1.0)])
    for t in range(1, 501):
        g = p_ref
        m = 0.5 * m + (1 - 0.5) * g
        v = 0.9 * v + (1 - 0.9) * g * g
        p_ref -= 0.01 * (m / (1 - 0.5 ** t)) / (np.sqrt(v / (1 - 0.9 ** t)) + 1e-8)
        p, s = adam_step(p, [p[0]], s, 0.01)
        if t <= 200:
            # later on, steps of size ~lr around 0 amplify last-bit rounding
            assert float(p[0]) == pytest.approx(p_ref, rel=1e-12)
    assert abs(float(p[0])) < 1e-3 and abs(p_ref) < 1e-3
    assert s.step == 500


def test_adam_does_not_mutate_inputs(rng):
    params = [rng.normal(size=3)]
    before = params[0].copy()
    state = AdamState.zeros_like(params)
    adam_step(params, [np.ones(3)], state, 0.1)
    np.testing.assert_array_equal(params[0], before)
    assert state.step == 0 and np.all(state.m[0] == 0)


def test_wrapper_classes(rng):
    opt = Adam(0.01)
    p = [np.array([1.0])]
    p = opt.step(p, [np.array([1.0])])
    assert opt.state.step == 1 and opt.state_dict()["step"] == 1
    assert Sgd(0.1).step([np.array(1.0)], [np.array(1.0)])[0] == pytest.approx(0.9)
    s = AdamState.from_dict(opt.state.to_dict())
    assert s.step == 1
