#
# validate.py
#

from typing import Any

import numpy as np

from .errors import ContractViolation, NumericError


def validate_positive(name: str, value: Any) -> None:
    """ Checks whether `value` is a real number strictly greater than `0`.

        Parameters
        ----------
        name: :class:`str`
            The name reported in error messages.
        value: Any
            This should be an :class:`int` or :class:`float` above `0`.

        Raises
        ------
        TypeError
            The `value` is not a real number.
        ContractViolation
            The `value` is not strictly positive.
    """
    if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
        raise TypeError(
            f"Expected `{name}` to be a real number, "
            f"instead found type {type(value).__name__}"
        )
    if not value > 0:
        raise ContractViolation(
            f"Expected `{name}` to be strictly positive, "
            f"instead found {value}"
        )


def validate_nonnegative(name: str, value: float) -> None:
    """ Checks whether `value` is a real number no less than `0`.

        Raises
        ------
        ContractViolation
            The `value` is negative or not a number.
    """
    if not value >= 0:
        raise ContractViolation(
            f"Expected `{name}` to be non-negative, "
            f"instead found {value}"
        )


def validate_choice(name: str, value: Any, choices: tuple) -> None:
    """ Checks whether `value` is one of `choices`.

        Raises
        ------
        ContractViolation
            The `value` is not among the `choices`.
    """
    if value not in choices:
        raise ContractViolation(
            f"Expected `{name}` to be one of {', '.join(map(repr, choices))}, "
            f"instead found {value!r}"
        )


def validate_finite(name: str, values: Any) -> None:
    """ Checks whether every entry of `values` is finite.

        Raises
        ------
        NumericError
            Some entry is `nan` or infinite.
    """
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Non-finite value encountered in `{name}`", node=name)


def validate_simplex(name: str, weights: np.ndarray, tol: float = 1e-6) -> None:
    """ Checks whether `weights` is a probability vector.

        Parameters
        ----------
        name: :class:`str`
            The name reported in error messages.
        weights: :class:`numpy.ndarray`
            A one-dimensional weight vector.
        tol: :class:`float`
            Allowed deviation of the sum from `1` and of entries below `0`.

        Raises
        ------
        ContractViolation
            The weights are negative or do not sum to `1`.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or weights.size == 0:
        raise ContractViolation(f"Expected `{name}` to be a non-empty vector")
    if np.any(weights < -tol) or abs(weights.sum() - 1.0) > tol:
        raise ContractViolation(
            f"Expected `{name}` to lie on the simplex, "
            f"instead found sum {weights.sum():.9f} and minimum {weights.min():.3g}"
        )
