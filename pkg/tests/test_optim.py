import numpy as np
import pytest

from xattn.errors import ShapeMismatch
from xattn.optim import AdamState, adam_step


def test_zero_gradient_no_decay_is_a_no_op():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1, weight_decay=0.0))
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_first_step_moves_by_lr():
    p = {"w": np.array(0.5)}
    adam_step(p, {"w": np.array(1.0)}, AdamState(lr=1e-3, weight_decay=0.0))
    assert float(p["w"]) == pytest.approx(0.5 - 1e-3, abs=1e-9)


def test_weight_decay_is_decoupled():
    p = {"w": np.array([2.0])}
    adam_step(p, {"w": np.zeros(1)}, AdamState(lr=0.1, weight_decay=0.5))
    assert p["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_identical_runs_are_bit_identical():
    def run():
        rng = np.random.default_rng(0)
        p = {"a": rng.standard_normal((3, 2))}
        st = AdamState()
        for _ in range(20):
            adam_step(p, {"a": np.sin(p["a"]) + rng.standard_normal((3, 2))}, st)
        return p["a"]

    assert np.array_equal(run(), run())


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_minimizes_a_quadratic():
    p = {"x": np.array([3.0, -4.0])}
    st = AdamState(lr=0.05, weight_decay=0.0)
    for _ in range(2000):
        adam_step(p, {"x": 2 * p["x"]}, st)
    assert np.allclose(p["x"], 0.0, atol=1e-2)
