import numpy as np
import pytest

from gcdt.optim import AdamW, NonFiniteGradientError, clip_grad_norm
from gcdt.tensor import Tensor


def _single_param(value=1.0):
    p = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
    return {"theta": p}


def test_first_step_hand_computed():
    # theta=1, g=1, defaults: update = 1e-4 * (1/(1+1e-8)), decay = 1e-4*1e-4*1
    params = _single_param(1.0)
    opt = AdamW(params)
    opt.step({"theta": np.array([1.0])})
    expected = 1.0 - 1e-4 * (1.0 / (1.0 + 1e-8)) - 1e-8
    assert abs(float(params["theta"].data[0]) - expected) < 1e-12
    assert abs(float(params["theta"].data[0]) - 0.99989999) < 1e-8
    assert opt.step_count == 1


def test_zero_everything_stays_zero():
    params = _single_param(0.0)
    opt = AdamW(params)
    for _ in range(25):
        opt.step({"theta": np.array([0.0])})
    assert float(params["theta"].data[0]) == 0.0


def test_zero_grad_zero_decay_unchanged():
    params = _single_param(3.5)
    opt = AdamW(params, weight_decay=0.0)
    for _ in range(10):
        opt.step({"theta": np.array([0.0])})
    assert float(params["theta"].data[0]) == 3.5


def test_decoupled_decay_is_exactly_geometric():
    lr, wd = 1e-2, 0.1
    params = _single_param(2.0)
    opt = AdamW(params, lr=lr, weight_decay=wd)
    for k in range(1, 8):
        opt.step({"theta": np.array([0.0])})
        expected = 2.0 * (1.0 - lr * wd) ** k
        assert float(params["theta"].data[0]) == pytest.approx(expected, rel=0, abs=0)


def test_missing_grad_treated_as_zero():
    params = _single_param(1.0)
    opt = AdamW(params, lr=1e-2, weight_decay=0.1)
    opt.step({})
    assert float(params["theta"].data[0]) == 1.0 * (1 - 1e-2 * 0.1)


def test_non_finite_gradient_names_parameter():
    params = _single_param()
    opt = AdamW(params)
    with pytest.raises(NonFiniteGradientError, match="theta"):
        opt.step({"theta": np.array([np.nan])})


def test_shape_mismatch_rejected():
    params = _single_param()
    opt = AdamW(params)
    with pytest.raises(ValueError, match="shape"):
        opt.step({"theta": np.zeros(3)})


def test_convergence_on_quadratic():
    # minimize (theta - 3)^2 without decay; AdamW should close most of the gap
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.05, weight_decay=0.0)
    for _ in range(400):
        g = 2.0 * (p.data - 3.0)
        opt.step({"p": g})
    assert abs(float(p.data[0]) - 3.0) < 0.05


def test_clip_grad_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([0.0, 4.0])}
    norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    assert total == pytest.approx(1.0)
    # under the limit: untouched
    grads2 = {"a": np.array([0.3])}
    clip_grad_norm(grads2, 1.0)
    assert float(grads2["a"][0]) == 0.3
