#
# optim.py
#

from typing import Mapping

import numpy as np

from .autodiff import ParameterSet, Tensor


class Optimizer:
    """ Base class for gradient-ascent optimizers over a :class:`ParameterSet`.

        Parameters
        ----------
        lr: :class:`float`
            The step size.
    """

    def __init__(self, lr: float) -> None:
        self.lr = lr

    def proposal(self, params: ParameterSet, grads: Mapping[str, Tensor]) -> ParameterSet:
        """ Returns new parameters one ascent step away from `params`.

            `params` itself is left untouched.
        """
        raise NotImplementedError


class SGD(Optimizer):
    """ Plain gradient ascent: phi + lr * grad. """

    def proposal(self, params: ParameterSet, grads: Mapping[str, Tensor]) -> ParameterSet:
        new = params.copy()
        for name, tensor in new.items():
            if name in grads:
                tensor.values = tensor.values + self.lr * grads[name].values
        return new


class Adam(Optimizer):
    """ Adam ascent with bias-corrected moment estimates.

        Moments are kept per parameter name, so one instance may serve several
        parameter sets as long as their names do not collide.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        super().__init__(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._first: dict[str, np.ndarray] = {}
        self._second: dict[str, np.ndarray] = {}
        self._steps: dict[str, int] = {}

    def proposal(self, params: ParameterSet, grads: Mapping[str, Tensor]) -> ParameterSet:
        new = params.copy()
        for name, tensor in new.items():
            if name not in grads:
                continue
            g = grads[name].values
            m = self.beta1 * self._first.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self._second.get(name, 0.0) + (1.0 - self.beta2) * g * g
            t = self._steps.get(name, 0) + 1
            self._first[name], self._second[name], self._steps[name] = m, v, t
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            tensor.values = tensor.values + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return new


def make_optimizer(kind: str, lr: float) -> Optimizer:
    """ Returns an `"adam"` or `"sgd"` optimizer with step size `lr`. """
    match kind:
        case "adam":
            return Adam(lr)
        case "sgd":
            return SGD(lr)
    raise ValueError(f"Unknown optimizer '{kind}'")
