#
# autodiff.py
#

import json
from contextvars import ContextVar
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy import special

from .errors import ContractViolation, NumericError

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_ACTIVE_TAPE: ContextVar["ComputationTape | None"] = ContextVar("active_tape", default=None)


class Tensor:
    """ A float64 array that remembers how it was computed.

        Operations on tensors run eagerly. While a :class:`ComputationTape`
        is active, every result that depends on a tensor with
        `requires_grad` set is recorded so that :meth:`ComputationTape.backward`
        can propagate gradients back to the leaves.

        Supported operations
        --------------------
        `x + y`, `x - y`, `x * y`, `x / y`, `-x`
            Elementwise arithmetic with numpy broadcasting.
        `x @ y`
            Batched matrix product of operands with at least two dimensions.
        `x[index]`
            Basic and integer-array indexing.

        Parameters
        ----------
        values: array-like
            The tensor contents, copied and converted to float64.
        requires_grad: :class:`bool`
            Whether gradients should be accumulated into this tensor.
        name: :class:`str` | `None`
            Name under which the gradient is reported.
    """

    __array_ufunc__ = None

    def __init__(self, values, requires_grad: bool = False, name: str | None = None) -> None:
        self._values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Tensor | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self._tape_index = -1

    @classmethod
    def from_op(
            cls,
            values: np.ndarray,
            parents: Sequence["Tensor"],
            backward: Backward,
            op: str,
        ) -> "Tensor":
        """ Wraps the result of a primitive and records it on the active tape.

            Parameters
            ----------
            values: :class:`numpy.ndarray`
                The forward result.
            parents: Sequence[:class:`Tensor`]
                The operands of the primitive.
            backward: Callable
                Maps the output gradient to one gradient (or `None`) per parent.
            op: :class:`str`
                Name of the primitive, used in diagnostics.

            Raises
            ------
            NumericError
                The forward result contains a non-finite value.
        """
        out = cls.__new__(cls)
        out._values = np.asarray(values, dtype=np.float64)
        out.requires_grad = False
        out.name = None
        out.grad = None
        out.op = op
        out._parents = ()
        out._backward = None
        out._tape_index = -1
        if not np.all(np.isfinite(out._values)):
            raise NumericError("Non-finite value in forward pass", node=op)
        tape = _ACTIVE_TAPE.get()
        if tape is not None and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            tape.record(out)
        return out

    @property
    def values(self) -> np.ndarray:
        """ :class:`numpy.ndarray`: The tensor contents. """
        return self._values

    @values.setter
    def values(self, value: np.ndarray) -> None:
        if self._backward is not None:
            raise AttributeError("Only leaf tensors can be assigned new values.")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._values.shape:
            raise ContractViolation(
                f"Expected values of shape {self._values.shape}, "
                f"instead found {value.shape}"
            )
        self._values = value.copy()

    @property
    def shape(self) -> tuple[int, ...]:
        """ tuple[:class:`int`, ...]: The tensor dimensions. """
        return self._values.shape

    @property
    def ndim(self) -> int:
        return self._values.ndim

    def item(self) -> float:
        """ Returns the only entry of a single-element tensor. """
        if self._values.size != 1:
            raise ContractViolation(f"item() needs a single-element tensor, found shape {self.shape}")
        return float(self._values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """ Returns a copy of the contents detached from any tape. """
        return self._values.copy()

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor": return exp(self)
    def log(self) -> "Tensor": return log(self)
    def tanh(self) -> "Tensor": return tanh(self)
    def relu(self) -> "Tensor": return relu(self)
    def sigmoid(self) -> "Tensor": return sigmoid(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class ComputationTape:
    """ Ordered record of the operations of one forward pass.

        Use as a context manager: operations executed inside the `with` block
        are recorded in creation order, which is a topological order of the
        graph. A tape belongs to the thread (context) that entered it.
    """

    def __init__(self) -> None:
        self._nodes: list[Tensor] = []
        self._tokens = []

    def __enter__(self) -> "ComputationTape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, node: Tensor) -> None:
        """ Appends `node` to the tape. """
        node._tape_index = len(self._nodes)
        self._nodes.append(node)

    def backward(self, output: Tensor) -> dict[str, Tensor]:
        """ Propagates d(`output`) back to every leaf that requires a gradient.

            Each recorded node is visited at most once, in reverse recording
            order. Leaf gradients are stored in `leaf.grad`.

            Parameters
            ----------
            output: :class:`Tensor`
                A single-element tensor recorded on this tape.

            Raises
            ------
            ContractViolation
                `output` is not a scalar or was not recorded on this tape.
            NumericError
                A gradient became non-finite; the message names the node.

            Returns
            -------
            dict[:class:`str`, :class:`Tensor`]
                Gradients of the named leaves reached from `output`.
        """
        if output.values.size != 1:
            raise ContractViolation(
                f"Expected a scalar output for backward, instead found shape {output.shape}"
            )
        index = output._tape_index
        if index < 0 or index >= len(self._nodes) or self._nodes[index] is not output:
            raise ContractViolation("The output was not recorded on this tape.")

        pending: dict[int, np.ndarray] = {id(output): np.ones_like(output.values)}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for node in reversed(self._nodes[: index + 1]):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(parent_grad)):
                    raise NumericError("Non-finite gradient", node=f"{node.op}#{node._tape_index}")
                if parent._backward is None:
                    _, acc = leaves.get(id(parent), (parent, 0.0))
                    leaves[id(parent)] = (parent, acc + parent_grad)
                else:
                    pending[id(parent)] = pending.get(id(parent), 0.0) + parent_grad

        result = {}
        for leaf, grad in leaves.values():
            leaf.grad = Tensor(np.broadcast_to(grad, leaf.shape))
            if leaf.name is not None:
                result[leaf.name] = leaf.grad
        return result


def backward(
        tape: ComputationTape,
        output: Tensor,
        params: "ParameterSet | Iterable[ParameterSet] | None" = None,
    ) -> dict[str, Tensor]:
    """ Computes the gradient of a scalar `output` with respect to parameters.

        Parameters
        ----------
        tape: :class:`ComputationTape`
            The tape the forward pass was recorded on.
        output: :class:`Tensor`
            Scalar result of the forward pass.
        params: :class:`ParameterSet` | Iterable[:class:`ParameterSet`] | `None`
            When given, every parameter of these sets appears in the result,
            with a zero gradient if `output` does not depend on it.

        Returns
        -------
        dict[:class:`str`, :class:`Tensor`]
            Gradient per parameter name.
    """
    grads = tape.backward(output)
    if params is None:
        return grads
    if isinstance(params, ParameterSet):
        params = [params]
    for param_set in params:
        for name, tensor in param_set.items():
            if name not in grads:
                grads[name] = Tensor(np.zeros_like(tensor.values))
    return grads


#
# Primitives
#

def as_tensor(value) -> Tensor:
    """ Returns `value` unchanged if it is a :class:`Tensor`, else a constant tensor. """
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """ Sums `grad` over the axes that broadcasting added or stretched. """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.values + b.values, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.values - b.values, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.values * b.values, (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values / b.values
    return Tensor.from_op(
        out, (a, b),
        lambda g: (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * out / b.values, b.shape),
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(-a.values, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """ Batched matrix product; both operands need at least two dimensions. """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(
            f"matmul expects operands with at least 2 dimensions, found {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return Tensor.from_op(
        a.values @ b.values, (a, b),
        lambda g: (
            _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape),
            _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape),
        ),
        "matmul",
    )


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Tensor.from_op(a.values.sum(axis=axis, keepdims=keepdims), (a,), _backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.values.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(np.log(a.values), (a,), lambda g: (g / a.values,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(
        np.maximum(a.values, 0.0), (a,), lambda g: (g * (a.values > 0),), "relu"
    )


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.values)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a) -> Tensor:
    """ Numerically stable log(sigmoid(a)). """
    a = as_tensor(a)
    return Tensor.from_op(
        -np.logaddexp(0.0, -a.values), (a,),
        lambda g: (g * special.expit(-a.values),),
        "log_sigmoid",
    )


def clamp(a, low: float, high: float) -> Tensor:
    """ Clips `a` to [`low`, `high`]; the gradient is zero outside the interval. """
    a = as_tensor(a)
    inside = (a.values >= low) & (a.values <= high)
    return Tensor.from_op(
        np.clip(a.values, low, high), (a,), lambda g: (g * inside,), "clamp"
    )


def gammaln(a) -> Tensor:
    """ log|Gamma(a)| with gradient digamma(a). """
    a = as_tensor(a)
    return Tensor.from_op(
        special.gammaln(a.values), (a,), lambda g: (g * special.digamma(a.values),), "gammaln"
    )


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(
        np.concatenate([t.values for t in tensors], axis=axis), tensors, _backward, "concat"
    )


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(
        a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
    )


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(
        np.swapaxes(a.values, axis1, axis2), (a,),
        lambda g: (np.swapaxes(g, axis1, axis2),),
        "swapaxes",
    )


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(a.values[index], (a,), _backward, "getitem")


#
# Parameters
#

class ParameterSet:
    """ Named, ordered collection of trainable tensors.

        Supported operations
        --------------------
        `params[name]`
            Returns the :class:`Tensor` registered under `name`.
        `name in params`
            Checks whether a parameter is registered.
        `iter(params)`
            Iterates over names in registration order.

        Parameters
        ----------
        tensors: Mapping[:class:`str`, array-like] | `None`
            Initial parameters, registered in mapping order.

        Raises
        ------
        ContractViolation
            A name is registered twice.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None) -> None:
        self._tensors: dict[str, Tensor] = {}
        for name, values in (tensors or {}).items():
            self.add(name, values)

    def add(self, name: str, values) -> Tensor:
        """ Registers a new trainable tensor and returns it. """
        if name in self._tensors:
            raise ContractViolation(f"Parameter '{name}' is already registered.")
        tensor = Tensor(values, requires_grad=True, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, ParameterSet)
            and list(self) == list(other)
            and all(np.array_equal(self[name].values, other[name].values) for name in self)
        )

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    @property
    def size(self) -> int:
        """ :class:`int`: Total number of scalar parameters. """
        return sum(t.values.size for t in self._tensors.values())

    def copy(self) -> "ParameterSet":
        """ Returns an independent copy with identical names and values. """
        return ParameterSet({name: t.values.copy() for name, t in self.items()})

    def assign(self, other: "ParameterSet") -> None:
        """ Copies every value of `other` into this set.

            Raises
            ------
            ContractViolation
                The sets differ in names or shapes.
        """
        if list(self) != list(other):
            raise ContractViolation("Parameter sets have different names.")
        for name, tensor in self.items():
            tensor.values = other[name].values

    def to_dict(self) -> dict:
        return {
            name: {"shape": list(t.shape), "values": t.values.reshape(-1).tolist()}
            for name, t in self.items()
        }

    @classmethod
    def from_dict(cls, document: Mapping) -> "ParameterSet":
        params = cls()
        for name, entry in document.items():
            values = np.asarray(entry["values"], dtype=np.float64)
            params.add(name, values.reshape(entry["shape"]))
        return params

    def save(self, path: str | Path) -> None:
        """ Writes the set as JSON `{name: {shape: [...], values: [...]}}`. """
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "ParameterSet":
        """ Reads a set written by :meth:`save`. """
        return cls.from_dict(json.loads(Path(path).read_text()))


def numerical_gradient(
        fn: Callable[[], float],
        tensor: Tensor,
        index: tuple[int, ...],
        step: float = 1e-4,
    ) -> float:
    """ Central finite difference of `fn` with respect to one entry of `tensor`.

        Parameters
        ----------
        fn: Callable[[], :class:`float`]
            Re-evaluates the scalar function from the current tensor values.
        tensor: :class:`Tensor`
            The leaf being perturbed; restored afterwards.
        index: tuple[:class:`int`, ...]
            The perturbed entry.
        step: :class:`float`
            Half-width of the difference.

        Returns
        -------
        :class:`float`
            The estimated partial derivative.
    """
    original = tensor.values[index]
    try:
        tensor.values[index] = original + step
        upper = fn()
        tensor.values[index] = original - step
        lower = fn()
    finally:
        tensor.values[index] = original
    return (upper - lower) / (2.0 * step)
