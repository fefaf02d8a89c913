#
# features.py
#

from dataclasses import dataclass, field
from enum import StrEnum
from typing import Callable, Iterable

import numpy as np
import pandas as pd

from .errors import ContractViolation
from .simulator import DISTURBANCE_COLUMNS
from .validate import validate_choice, validate_finite

VARIABLES = ("x", "u") + DISTURBANCE_COLUMNS
DEFAULT_LOOKBACK = 8

# (variable, lag); lag 0 of "u" is the candidate control u_t
Term = tuple[str, int]
Reader = Callable[[str, int], "np.ndarray | float"]


class Role(StrEnum):
    STATE = "state"
    PAST_CONTROL = "past_control"
    DISTURBANCE = "disturbance"
    CURRENT_CONTROL = "current_control"


class Kind(StrEnum):
    LAG = "lag"
    SQUARE = "square"
    PRODUCT = "product"
    GAP_PRODUCT = "gap_product"
    DAYTYPE = "daytype"


_ARITY = {Kind.LAG: 1, Kind.SQUARE: 1, Kind.PRODUCT: 2, Kind.GAP_PRODUCT: 3, Kind.DAYTYPE: 0}


def _format_term(term: Term) -> str:
    variable, lag = term
    return f"{variable}[t]" if lag == 0 else f"{variable}[t-{lag}]"


@dataclass(frozen=True)
class TimeSeriesWindow:
    """ Look-back slice ending at step `t`.

        Parameters
        ----------
        x: :class:`numpy.ndarray`
            Indoor temperatures at `t-L+1 .. t` (degC), length `L`.
        u: :class:`numpy.ndarray`
            HVAC powers at `t-L+1 .. t-1` (W), length `L-1`.
        d: :class:`numpy.ndarray`
            Disturbances at `t-L+1 .. t`, shape (L, c).
        sampling_minutes: :class:`int`
            The sampling interval.
        timestamps: :class:`pandas.DatetimeIndex` | `None`
            Times of the `L` rows; needed by day-type features only.
        disturbance_names: tuple[:class:`str`, ...]
            Names of the columns of `d`.

        Raises
        ------
        ContractViolation
            The lengths are inconsistent.
        NumericError
            Some value is missing or not finite.
    """

    x: np.ndarray
    u: np.ndarray
    d: np.ndarray
    sampling_minutes: int = 15
    timestamps: pd.DatetimeIndex | None = None
    disturbance_names: tuple[str, ...] = DISTURBANCE_COLUMNS

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float).reshape(len(self.x), -1))
        lookback = len(self.x)
        if lookback < 1 or self.x.ndim != 1:
            raise ContractViolation(f"Expected a one-dimensional state history, found shape {self.x.shape}")
        if self.u.shape != (lookback - 1,):
            raise ContractViolation(f"Expected {lookback - 1} past controls, instead found {self.u.shape}")
        if self.d.shape[1] != len(self.disturbance_names):
            raise ContractViolation(
                f"Expected {len(self.disturbance_names)} disturbance columns, instead found {self.d.shape[1]}"
            )
        if self.timestamps is not None and len(self.timestamps) != lookback:
            raise ContractViolation(f"Expected {lookback} timestamps, instead found {len(self.timestamps)}")
        for name in ("x", "u", "d"):
            validate_finite(name, getattr(self, name))

    @property
    def lookback(self) -> int:
        """ :class:`int`: The window length `L`. """
        return len(self.x)

    def reader(self, u_t: float) -> Reader:
        """ Returns a term reader over this window with candidate control `u_t`. """
        last = self.lookback - 1

        def read(variable: str, lag: int) -> float:
            if lag > last:
                raise ContractViolation(f"Lag {lag} exceeds the look-back window of {self.lookback} steps")
            match variable:
                case "x":
                    return float(self.x[last - lag])
                case "u":
                    return float(u_t) if lag == 0 else float(self.u[last - lag])
                case "day_type":
                    if self.timestamps is None:
                        raise ContractViolation("Day-type features need window timestamps")
                    return float(self.timestamps[last - lag].dayofweek >= 5)
            try:
                column = self.disturbance_names.index(variable)
            except ValueError:
                raise ContractViolation(f"Unknown variable '{variable}'") from None
            return float(self.d[last - lag, column])

        return read


@dataclass(frozen=True)
class Feature:
    """ One regressor of an affine one-step model.

        `kind` selects how the `terms` combine: a lagged value, its square, a
        product of two terms, the product `a * (b - c)` of three terms, or the
        weekend indicator at `lag`.
    """

    kind: Kind
    terms: tuple[Term, ...] = ()
    lag: int = 0

    def __post_init__(self) -> None:
        validate_choice("kind", self.kind, tuple(Kind))
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "terms", tuple((str(v), int(k)) for v, k in self.terms))
        if len(self.terms) != _ARITY[self.kind]:
            raise ContractViolation(
                f"A {self.kind} feature takes {_ARITY[self.kind]} terms, instead found {len(self.terms)}"
            )
        for variable, lag in self.terms:
            validate_choice("variable", variable, VARIABLES)
            if lag < 0:
                raise ContractViolation(f"Lags must be non-negative, instead found {lag}")
        if self.lag < 0:
            raise ContractViolation(f"Lags must be non-negative, instead found {self.lag}")
        if self._current_control_degree() > 1:
            raise ContractViolation(f"Feature {self.name} is not affine in the current control")

    def _current_control_degree(self) -> int:
        current = [term == ("u", 0) for term in self.terms]
        match self.kind:
            case Kind.SQUARE:
                return 2 * current[0]
            case Kind.GAP_PRODUCT:
                return current[0] + (current[1] or current[2])
        return sum(current)

    @property
    def name(self) -> str:
        """ :class:`str`: A readable rendering such as `u[t]*(t_amb[t]-x[t])`. """
        names = [_format_term(term) for term in self.terms]
        match self.kind:
            case Kind.LAG:
                return names[0]
            case Kind.SQUARE:
                return f"{names[0]}^2"
            case Kind.PRODUCT:
                return f"{names[0]}*{names[1]}"
            case Kind.GAP_PRODUCT:
                return f"{names[0]}*({names[1]}-{names[2]})"
        return _format_term(("day_type", self.lag))

    @property
    def role(self) -> Role:
        """ :class:`Role`: The coefficient group this feature belongs to. """
        if ("u", 0) in self.terms:
            return Role.CURRENT_CONTROL
        variables = {variable for variable, _ in self.terms}
        if "u" in variables:
            return Role.PAST_CONTROL
        if "x" in variables:
            return Role.STATE
        return Role.DISTURBANCE

    @property
    def variables(self) -> frozenset[str]:
        """ frozenset[:class:`str`]: The raw input variables this feature reads. """
        if self.kind is Kind.DAYTYPE:
            return frozenset({"day_type"})
        return frozenset(variable for variable, _ in self.terms)

    @property
    def max_lag(self) -> int:
        return max([lag for _, lag in self.terms] + [self.lag])

    def evaluate(self, read: Reader):
        """ Evaluates the feature through `read`, over scalars or aligned arrays alike. """
        values = [read(variable, lag) for variable, lag in self.terms]
        match self.kind:
            case Kind.LAG:
                return values[0]
            case Kind.SQUARE:
                return values[0] * values[0]
            case Kind.PRODUCT:
                return values[0] * values[1]
            case Kind.GAP_PRODUCT:
                return values[0] * (values[1] - values[2])
        return read("day_type", self.lag)

    def to_dict(self) -> dict:
        document = {"kind": str(self.kind), "terms": [list(term) for term in self.terms]}
        if self.kind is Kind.DAYTYPE:
            document["lag"] = self.lag
        return document

    @classmethod
    def from_dict(cls, document: dict) -> "Feature":
        return cls(Kind(document["kind"]), tuple(map(tuple, document.get("terms", ()))), document.get("lag", 0))


def lag(variable: str, k: int = 0) -> Feature:
    return Feature(Kind.LAG, ((variable, k),))


def square(variable: str, k: int = 0) -> Feature:
    return Feature(Kind.SQUARE, ((variable, k),))


def product(a: Term, b: Term) -> Feature:
    return Feature(Kind.PRODUCT, (a, b))


def gap_product(a: Term, b: Term, c: Term) -> Feature:
    return Feature(Kind.GAP_PRODUCT, (a, b, c))


def daytype(k: int = 0) -> Feature:
    return Feature(Kind.DAYTYPE, lag=k)


@dataclass(frozen=True)
class FeatureSpec:
    """ Ordered regressors of a base model together with its look-back `L`.

        Raises
        ------
        ContractViolation
            Some feature lags beyond the window or appears twice.
    """

    lookback: int
    features: tuple[Feature, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", tuple(self.features))
        if self.lookback < 1:
            raise ContractViolation(f"Expected a positive look-back, instead found {self.lookback}")
        for feature in self.features:
            if feature.max_lag > self.lookback - 1:
                raise ContractViolation(
                    f"Feature {feature.name} lags beyond the look-back window of {self.lookback} steps"
                )
        names = self.names
        if len(set(names)) != len(names):
            raise ContractViolation("Feature specs cannot repeat a feature")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [feature.name for feature in self.features]

    @property
    def controllable(self) -> bool:
        """ :class:`bool`: Whether some feature carries the current control. """
        return any(feature.role is Role.CURRENT_CONTROL for feature in self.features)

    def subset(self, indices: Iterable[int]) -> "FeatureSpec":
        return FeatureSpec(self.lookback, tuple(self.features[i] for i in indices))

    def to_dict(self) -> dict:
        return {"lookback": self.lookback, "features": [feature.to_dict() for feature in self.features]}

    @classmethod
    def from_dict(cls, document: dict) -> "FeatureSpec":
        return cls(document["lookback"], tuple(Feature.from_dict(f) for f in document["features"]))

    @classmethod
    def default_mlr(cls, lookback: int = DEFAULT_LOOKBACK) -> "FeatureSpec":
        """ Sensor readings, a short state history, day type and the current control. """
        return cls(lookback, (
            lag("x", 0), lag("x", 1), lag("x", 2), lag("u", 1),
            lag("t_amb", 0), lag("occupancy", 0), lag("solar", 0),
            daytype(0), lag("u", 0),
        ))

    @classmethod
    def default_dictionary(cls, lookback: int = DEFAULT_LOOKBACK) -> "FeatureSpec":
        """ Candidate terms of the sparse dictionary regression. """
        return cls(lookback, (
            lag("x", 0), lag("x", 1), lag("x", 2), lag("x", 3),
            lag("u", 1), lag("u", 2), lag("u", 3),
            lag("t_amb", 0), lag("t_amb", 1), lag("occupancy", 0), lag("solar", 0),
            daytype(0), lag("u", 0),
            square("x", 0), square("t_amb", 0),
            product(("x", 0), ("t_amb", 0)),
            gap_product(("u", 1), ("t_amb", 0), ("x", 0)),
            gap_product(("u", 0), ("t_amb", 0), ("x", 0)),
            product(("occupancy", 0), ("x", 0)),
            product(("solar", 0), ("x", 0)),
        ))


def build_feature_vector(window: TimeSeriesWindow, u_t: float, spec: FeatureSpec) -> np.ndarray:
    """ Evaluates `spec` on `window` with candidate control `u_t`.

        Raises
        ------
        ContractViolation
            The window is shorter than the spec's look-back or a lag exceeds it.

        Returns
        -------
        :class:`numpy.ndarray`
            The features in spec order.
    """
    if window.lookback < spec.lookback:
        raise ContractViolation(
            f"Expected a window of at least {spec.lookback} steps, instead found {window.lookback}"
        )
    read = window.reader(u_t)
    return np.array([feature.evaluate(read) for feature in spec.features], dtype=float)


def frame_reader(frame: pd.DataFrame, rows: np.ndarray) -> Reader:
    """ Term reader that returns, for every index `t` in `rows`, the value at `t - lag`. """
    columns = {
        "x": frame["t_room"].to_numpy(dtype=float),
        "u": frame["u_hvac"].to_numpy(dtype=float),
        "day_type": frame["day_type"].to_numpy(dtype=float),
    }
    for name in DISTURBANCE_COLUMNS:
        columns[name] = frame[name].to_numpy(dtype=float)

    def read(variable: str, lag: int) -> np.ndarray:
        if np.any(rows - lag < 0):
            raise ContractViolation(f"Lag {lag} reaches before the start of the frame")
        return columns[variable][rows - lag]

    return read


def design_matrix(frame: pd.DataFrame, spec: FeatureSpec, start: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ Builds regressors and next-step targets over a whole frame.

        Rows are the steps `t` from `start` (default `L - 1`) through the
        second-to-last row, so that `t_room[t + 1]` exists.

        Returns
        -------
        tuple[:class:`numpy.ndarray`, :class:`numpy.ndarray`, :class:`numpy.ndarray`]
            Regressors of shape (rows, F), targets and the step indices `t`.
    """
    start = spec.lookback - 1 if start is None else start
    if start < spec.lookback - 1:
        raise ContractViolation(f"Steps before {spec.lookback - 1} have no complete window")
    rows = np.arange(start, len(frame) - 1)
    read = frame_reader(frame, rows)
    matrix = np.empty((len(rows), len(spec)))
    for j, feature in enumerate(spec.features):
        matrix[:, j] = feature.evaluate(read)
    targets = frame["t_room"].to_numpy(dtype=float)[rows + 1]
    return matrix, targets, rows


def window_at(frame: pd.DataFrame, t: int, lookback: int, sampling_minutes: int = 15) -> TimeSeriesWindow:
    """ Cuts the window ending at row `t` out of a dataset frame. """
    if not lookback - 1 <= t < len(frame):
        raise ContractViolation(f"Row {t} has no complete {lookback}-step window")
    rows = slice(t - lookback + 1, t + 1)
    return TimeSeriesWindow(
        x=frame["t_room"].to_numpy(dtype=float)[rows],
        u=frame["u_hvac"].to_numpy(dtype=float)[t - lookback + 1 : t],
        d=frame[list(DISTURBANCE_COLUMNS)].to_numpy(dtype=float)[rows],
        sampling_minutes=sampling_minutes,
        timestamps=pd.DatetimeIndex(frame["timestamp"].iloc[rows]),
    )
