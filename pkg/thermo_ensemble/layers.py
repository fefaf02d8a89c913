#
# layers.py
#

import numpy as np

from .autodiff import ParameterSet, Tensor, as_tensor, matmul
from .errors import ContractViolation


def glorot_uniform(
        rng: np.random.Generator,
        shape: tuple[int, ...],
        fan_in: int,
        fan_out: int,
    ) -> np.ndarray:
    """ Draws weights uniformly from [-a, a] with a = sqrt(6 / (fan_in + fan_out)). """
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def add_dense(params: ParameterSet, prefix: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
    """ Registers `<prefix>.weight` (n_in x n_out) and a zero `<prefix>.bias`. """
    params.add(f"{prefix}.weight", glorot_uniform(rng, (n_in, n_out), n_in, n_out))
    params.add(f"{prefix}.bias", np.zeros(n_out))


def add_conv(
        params: ParameterSet,
        prefix: str,
        kernel: int,
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
    ) -> None:
    """ Registers `<prefix>.weight` (kernel x n_in x n_out) and a zero `<prefix>.bias`. """
    params.add(
        f"{prefix}.weight",
        glorot_uniform(rng, (kernel, n_in, n_out), kernel * n_in, kernel * n_out),
    )
    params.add(f"{prefix}.bias", np.zeros(n_out))


def dense(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    """ Applies the affine layer `<prefix>` over the last axis of `x`. """
    return matmul(x, params[f"{prefix}.weight"]) + params[f"{prefix}.bias"]


def dilated_causal_conv1d(x, weight: Tensor, bias: Tensor, dilation: int) -> Tensor:
    """ One-dimensional dilated causal convolution over the time axis.

        The input is left-padded with `(K - 1) * dilation` zeros so that the
        output has the same length as the input and position `t` only sees
        input positions `<= t`. Tap `K - 1` is aligned with the current step.

        Parameters
        ----------
        x: :class:`Tensor`
            Sequence of shape (..., T, C_in).
        weight: :class:`Tensor`
            Kernel of shape (K, C_in, C_out).
        bias: :class:`Tensor`
            Bias of shape (C_out,).
        dilation: :class:`int`
            Spacing between kernel taps, at least `1`.

        Raises
        ------
        ContractViolation
            The shapes are inconsistent or `dilation` is not positive.

        Returns
        -------
        :class:`Tensor`
            Sequence of shape (..., T, C_out).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 3 or weight.shape[0] < 1:
        raise ContractViolation(f"Expected a kernel of shape (K, C_in, C_out), found {weight.shape}")
    kernel, n_in, n_out = weight.shape
    if x.ndim < 2 or x.shape[-1] != n_in:
        raise ContractViolation(f"Expected input channels {n_in}, found input shape {x.shape}")
    if bias.shape != (n_out,):
        raise ContractViolation(f"Expected bias of shape ({n_out},), found {bias.shape}")
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ContractViolation(f"Expected a positive integer dilation, found {dilation}")

    steps = x.shape[-2]
    pad = (kernel - 1) * dilation
    padded = np.concatenate([np.zeros(x.shape[:-2] + (pad, n_in)), x.values], axis=-2)
    taps = [padded[..., k * dilation : k * dilation + steps, :] for k in range(kernel)]
    out = bias.values + sum(tap @ weight.values[k] for k, tap in enumerate(taps))

    def _backward(g):
        flat_g = g.reshape(-1, n_out)
        grad_w = np.stack([tap.reshape(-1, n_in).T @ flat_g for tap in taps])
        grad_b = flat_g.sum(axis=0)
        grad_x = None
        if x.requires_grad:
            grad_padded = np.zeros(padded.shape)
            for k in range(kernel):
                grad_padded[..., k * dilation : k * dilation + steps, :] += g @ weight.values[k].T
            grad_x = grad_padded[..., pad:, :]
        return grad_x, grad_w, grad_b

    return Tensor.from_op(out, (x, weight, bias), _backward, "conv1d")


def masked_softmax(logits, mask) -> Tensor:
    """ Softmax over the last axis restricted to the entries where `mask` is true.

        Masked-out entries are exactly `0`; the rest sum to `1`.

        Parameters
        ----------
        logits: :class:`Tensor`
            Scores of shape (..., N).
        mask: array-like of :class:`bool`
            Broadcastable to the shape of `logits`.

        Raises
        ------
        ContractViolation
            Some row has no true mask entry.

        Returns
        -------
        :class:`Tensor`
            Probabilities with the shape of `logits`.
    """
    logits = as_tensor(logits)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not np.all(mask.any(axis=-1)):
        raise ContractViolation("masked_softmax needs at least one true mask entry per row")

    shifted = np.where(mask, logits.values, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    weights = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    out = weights / weights.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (logits,), _backward, "masked_softmax")
