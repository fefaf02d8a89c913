#
# test_autodiff.py
#

import numpy as np
import pytest

from thermo_ensemble.autodiff import (
    ComputationTape, ParameterSet, Tensor, backward, clamp, concat, exp, gammaln, log,
    log_sigmoid, numerical_gradient, relu, reshape, sigmoid, swapaxes, tanh,
)
from thermo_ensemble.errors import ContractViolation, NumericError

def _close(analytic: float, numeric: float) -> bool:
    return abs(analytic - numeric) <= 1e-4 * max(abs(numeric), 1e-2)

def test_square():
    x = Tensor(3.0, requires_grad=True, name="x")
    with ComputationTape() as tape:
        y = x * x
    assert backward(tape, y)["x"].item() == 6.0

def test_product():
    x = Tensor(2.0, requires_grad=True, name="x")
    y = Tensor(5.0, requires_grad=True, name="y")
    with ComputationTape() as tape:
        z = x * y
    grads = backward(tape, z)
    assert grads["x"].item() == 5.0
    assert grads["y"].item() == 2.0

def test_reused_node_accumulates():
    x = Tensor(1.5, requires_grad=True, name="x")
    with ComputationTape() as tape:
        y = x * x
        z = y + y * x
    # dz/dx = 2x + 3x^2
    assert backward(tape, z)["x"].item() == pytest.approx(2 * 1.5 + 3 * 1.5 ** 2)

def test_non_scalar_output():
    x = Tensor([1.0, 2.0], requires_grad=True, name="x")
    with ComputationTape() as tape:
        y = x * 2.0
    with pytest.raises(ContractViolation):
        backward(tape, y)

def test_output_from_another_tape():
    x = Tensor(1.0, requires_grad=True, name="x")
    with ComputationTape():
        y = x * 2.0
    with ComputationTape() as other:
        pass
    with pytest.raises(ContractViolation):
        other.backward(y)

def test_non_finite_forward():
    x = Tensor([-1.0], requires_grad=True, name="x")
    with ComputationTape(), np.errstate(invalid="ignore"):
        with pytest.raises(NumericError) as info:
            log(x)
    assert info.value.node == "log"

def test_no_tape_records_nothing():
    x = Tensor(2.0, requires_grad=True, name="x")
    y = x * x
    assert not y.requires_grad
    assert y.item() == 4.0

def test_constants_are_untouched():
    x = Tensor(2.0, requires_grad=True, name="x")
    c = Tensor(3.0, name="c")
    with ComputationTape() as tape:
        y = x * c
    grads = backward(tape, y)
    assert "c" not in grads
    assert c.grad is None

def test_zero_fill_for_unused_parameters():
    params = ParameterSet({"a": np.ones(2), "b": np.ones(3)})
    with ComputationTape() as tape:
        y = (params["a"] * 2.0).sum()
    grads = backward(tape, y, params)
    np.testing.assert_array_equal(grads["a"].values, [2.0, 2.0])
    np.testing.assert_array_equal(grads["b"].values, np.zeros(3))

def test_broadcast_gradients_reduce_to_operand_shape():
    a = Tensor(np.ones((4, 3)), requires_grad=True, name="a")
    b = Tensor(np.ones(3), requires_grad=True, name="b")
    with ComputationTape() as tape:
        y = (a * b + b).sum()
    grads = backward(tape, y)
    assert grads["b"].shape == (3,)
    np.testing.assert_array_equal(grads["b"].values, [8.0, 8.0, 8.0])

def _composed(params: ParameterSet) -> Tensor:
    a, b, c = params["a"], params["b"], params["c"]
    h = tanh(a @ b) * sigmoid(a @ b) + exp(a @ b * 0.1)
    scale = swapaxes(reshape(c, (3, 2)), 0, 1)
    z = concat([h, log_sigmoid(h * 0.5)], axis=-1) @ concat([scale, scale], axis=0) / (1.0 + c.sum() * c.sum())
    return gammaln(sigmoid(z) + 0.5).mean() - log(h * h + 1.0)[1:, :].sum()

@pytest.mark.timeout(120)
def test_composed_graph_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(56):
        params = ParameterSet({
            "a": rng.uniform(-2, 2, (4, 3)),
            "b": rng.uniform(-2, 2, (3, 2)),
            "c": rng.uniform(-2, 2, 6),
        })
        with ComputationTape() as tape:
            out = _composed(params)
        grads = backward(tape, out, params)
        for name, tensor in params.items():
            for index in np.ndindex(tensor.shape):
                numeric = numerical_gradient(lambda: _composed(params).item(), tensor, index)
                assert _close(grads[name].values[index], numeric), (name, index)

@pytest.mark.parametrize("op, points", [
    (relu, [-1.5, -0.2, 0.3, 1.7]),
    (lambda t: clamp(t, -1.0, 1.0), [-1.8, -0.5, 0.4, 1.6]),
    (gammaln, [0.3, 1.0, 2.5, 7.0]),
    (log_sigmoid, [-30.0, -1.0, 0.0, 4.0]),
])
def test_elementwise_gradients(op, points):
    x = Tensor(np.array(points), requires_grad=True, name="x")
    with ComputationTape() as tape:
        y = op(x).sum()
    grads = backward(tape, y)
    for index in np.ndindex(x.shape):
        numeric = numerical_gradient(lambda: op(x).sum().item(), x, index)
        assert grads["x"].values[index] == pytest.approx(numeric, rel=1e-4, abs=1e-8)

def test_indexing_gradient():
    x = Tensor(np.arange(5.0), requires_grad=True, name="x")
    with ComputationTape() as tape:
        y = x[np.array([0, 2, 2, 4])].sum()
    np.testing.assert_array_equal(backward(tape, y)["x"].values, [1.0, 0.0, 2.0, 0.0, 1.0])

def test_determinism():
    def run():
        params = ParameterSet({
            "a": np.random.default_rng(3).uniform(-2, 2, (4, 3)),
            "b": np.random.default_rng(4).uniform(-2, 2, (3, 2)),
            "c": np.random.default_rng(5).uniform(-2, 2, 6),
        })
        with ComputationTape() as tape:
            out = _composed(params)
        return out.item(), backward(tape, out, params)["a"].values
    first, second = run(), run()
    assert first[0] == second[0]
    np.testing.assert_array_equal(first[1], second[1])

def test_parameter_set_round_trip(tmp_path):
    params = ParameterSet({"w": np.arange(6.0).reshape(2, 3), "b": np.array([0.1, -0.2])})
    params.save(tmp_path / "params.json")
    loaded = ParameterSet.load(tmp_path / "params.json")
    assert loaded == params
    assert list(loaded) == ["w", "b"]
    assert loaded.size == 8

def test_parameter_set_rejects_duplicates():
    params = ParameterSet({"w": np.zeros(2)})
    with pytest.raises(ContractViolation):
        params.add("w", np.zeros(2))

def test_parameter_set_copy_and_assign():
    params = ParameterSet({"w": np.zeros(2)})
    copy = params.copy()
    copy["w"].values = np.ones(2)
    assert np.all(params["w"].values == 0)
    params.assign(copy)
    assert np.all(params["w"].values == 1)
    with pytest.raises(ContractViolation):
        params.assign(ParameterSet({"v": np.zeros(2)}))
    with pytest.raises(ContractViolation):
        params.assign(ParameterSet({"w": np.zeros(3)}))
