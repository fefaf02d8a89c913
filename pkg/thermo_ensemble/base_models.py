#
# base_models.py
#

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from .errors import ContractViolation, FittingError
from .features import FeatureSpec, Role, TimeSeriesWindow, build_feature_vector, design_matrix
from .simulator import RoomDataset
from .validate import validate_choice, validate_nonnegative

logger = logging.getLogger(__name__)

METHODS = ("mlr", "dict")
COUNT_MODES = ("variables", "terms")
DEFAULT_RIDGE = 1e-8
ZERO_COEFFICIENT = 1e-12
# Smallest residual sum of squares the information criterion takes a log of
RSS_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class BaseModel:
    """ Affine one-step predictor `intercept + coefficients . features`.

        Parameters
        ----------
        spec: :class:`FeatureSpec`
            The regressors, in coefficient order.
        coefficients: :class:`numpy.ndarray`
            One coefficient per feature.
        intercept: :class:`float`
            The constant term.
        method: :class:`str`
            How the model was fitted, `"mlr"` or `"dict"`.
        source_room: :class:`str`
            The room whose data the model was fitted on.
        training_period: tuple[:class:`str`, :class:`str`]
            First and last timestamp of the fitting data.

        Raises
        ------
        ContractViolation
            The number of coefficients differs from the number of features.
    """

    spec: FeatureSpec
    coefficients: np.ndarray
    intercept: float = 0.0
    method: str = "mlr"
    source_room: str = ""
    training_period: tuple[str, str] = ("", "")
    id: int = -1

    def __post_init__(self) -> None:
        object.__setattr__(self, "coefficients", np.asarray(self.coefficients, dtype=float).copy())
        object.__setattr__(self, "intercept", float(self.intercept))
        if self.coefficients.shape != (len(self.spec),):
            raise ContractViolation(
                f"Expected {len(self.spec)} coefficients, instead found {self.coefficients.shape}"
            )
        self.coefficients.setflags(write=False)

    @property
    def variable_count(self) -> int:
        """ :class:`int`: Distinct raw variables with a non-zero coefficient. """
        return variable_count(self)

    @property
    def lookback(self) -> int:
        return self.spec.lookback

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "method": self.method,
            "source_room": self.source_room,
            "training_period": list(self.training_period),
            "spec": self.spec.to_dict(),
            "coefficients": self.coefficients.tolist(),
            "intercept": self.intercept,
            "variable_count": self.variable_count,
        }

    @classmethod
    def from_dict(cls, document: dict) -> "BaseModel":
        return cls(
            spec=FeatureSpec.from_dict(document["spec"]),
            coefficients=np.array(document["coefficients"], dtype=float),
            intercept=document["intercept"],
            method=document["method"],
            source_room=document["source_room"],
            training_period=tuple(document.get("training_period", ("", ""))),
            id=document["id"],
        )


def model_predict(model: BaseModel, window: TimeSeriesWindow, u_t: float) -> float:
    """ Predicts `x[t+1]` from `window` under candidate control `u_t`.

        Raises
        ------
        ContractViolation
            The window is shorter than the model's look-back.
    """
    return model.intercept + float(model.coefficients @ build_feature_vector(window, u_t, model.spec))


def variable_count(model: BaseModel, mode: str = "variables") -> int:
    """ Counts what a model uses, ignoring coefficients below `1e-12` in magnitude.

        Parameters
        ----------
        model: :class:`BaseModel`
            The model to inspect.
        mode: :class:`str`
            `"variables"` counts distinct raw inputs (x, u, each disturbance,
            day type); `"terms"` counts the features themselves.

        Returns
        -------
        :class:`int`
            The count; the intercept never contributes.
    """
    validate_choice("mode", mode, COUNT_MODES)
    active = [
        feature for feature, coefficient in zip(model.spec.features, model.coefficients)
        if abs(coefficient) > ZERO_COEFFICIENT
    ]
    if mode == "terms":
        return len(active)
    return len(set().union(*(feature.variables for feature in active)))


def _solve_ridge(matrix: np.ndarray, targets: np.ndarray, ridge: float) -> tuple[np.ndarray, float, float]:
    """ Minimises |y - c - X b|^2 + ridge |b|^2 with an unpenalised intercept `c`.

        Returns the coefficients, the intercept and the residual sum of squares.
    """
    mean_y = targets.mean()
    if matrix.shape[1] == 0:
        residual = targets - mean_y
        return np.zeros(0), float(mean_y), float(residual @ residual)
    mean_x = matrix.mean(axis=0)
    centered = matrix - mean_x
    stacked = np.vstack([centered, np.sqrt(ridge) * np.eye(matrix.shape[1])])
    rhs = np.concatenate([targets - mean_y, np.zeros(matrix.shape[1])])
    coefficients = linalg.lstsq(stacked, rhs)[0]
    intercept = float(mean_y - mean_x @ coefficients)
    residual = targets - intercept - matrix @ coefficients
    return coefficients, intercept, float(residual @ residual)


def _check_rows(rows: int, n_features: int, room_id: str) -> None:
    needed = max(10 * n_features, 1)
    if rows < needed:
        raise FittingError(
            f"Room '{room_id}' offers {rows} usable rows; at least {needed} are needed "
            f"for {n_features} features"
        )


def fit_least_squares(
        dataset: RoomDataset,
        spec: FeatureSpec,
        ridge: float = DEFAULT_RIDGE,
        method: str = "mlr",
    ) -> BaseModel:
    """ Fits every feature of `spec` by ridge-regularised least squares.

        Parameters
        ----------
        dataset: :class:`RoomDataset`
            The fitting data.
        spec: :class:`FeatureSpec`
            The regressors.
        ridge: :class:`float`
            Non-negative penalty on the coefficients, not on the intercept.
        method: :class:`str`
            The method tag stored with the model.

        Raises
        ------
        FittingError
            The dataset has fewer than `10 * len(spec)` usable rows.

        Returns
        -------
        :class:`BaseModel`
            The fitted model.
    """
    validate_nonnegative("ridge", ridge)
    matrix, targets, _ = design_matrix(dataset.frame, spec)
    _check_rows(len(targets), len(spec), dataset.room_id)
    coefficients, intercept, _ = _solve_ridge(matrix, targets, ridge)
    return BaseModel(spec, coefficients, intercept, method, dataset.room_id, dataset.period)


def bic(rss: float, rows: int, n_terms: int) -> float:
    """ Bayesian information criterion of a Gaussian linear model with an intercept. """
    return rows * np.log(max(rss, RSS_FLOOR) / rows) + (n_terms + 1) * np.log(rows)


def forward_selection(
        matrix: np.ndarray,
        targets: np.ndarray,
        max_terms: int,
        ridge: float = DEFAULT_RIDGE,
    ) -> list[int]:
    """ Greedy forward stepwise selection of columns under BIC.

        Starting from the intercept-only model, each round adds the column
        that most reduces the residual sum of squares. Selection stops once
        that addition no longer lowers BIC or `max_terms` columns are in.

        Returns
        -------
        list[:class:`int`]
            Selected column indices in the order they entered.
    """
    rows, n_candidates = matrix.shape
    selected: list[int] = []
    current = bic(_solve_ridge(matrix[:, []], targets, ridge)[2], rows, 0)
    while len(selected) < min(max_terms, n_candidates):
        best_rss, best_index = np.inf, -1
        for j in range(n_candidates):
            if j in selected:
                continue
            rss = _solve_ridge(matrix[:, selected + [j]], targets, ridge)[2]
            if rss < best_rss:
                best_rss, best_index = rss, j
        score = bic(best_rss, rows, len(selected) + 1)
        if score >= current:
            break
        selected.append(best_index)
        current = score
        logger.debug("Selected column %d, BIC %.3f", best_index, score)
    return selected


def fit_dictionary_regression(
        dataset: RoomDataset,
        spec: FeatureSpec,
        max_terms: int = 8,
        ridge: float = DEFAULT_RIDGE,
        require_control: bool = False,
    ) -> BaseModel:
    """ Fits a sparse model over a dictionary of candidate features.

        Terms are chosen by :func:`forward_selection` and refit by least
        squares on the selected set. With `require_control`, a model that ends
        up without a current-control term gets the current-control candidate
        that most reduces the residual.

        Parameters
        ----------
        dataset: :class:`RoomDataset`
            The fitting data.
        spec: :class:`FeatureSpec`
            The full dictionary of candidate features.
        max_terms: :class:`int`
            Upper bound on the number of selected terms, positive.
        ridge: :class:`float`
            Non-negative coefficient penalty.
        require_control: :class:`bool`
            Whether the model must respond to the current control.

        Raises
        ------
        FittingError
            The dataset has fewer than `10 * len(spec)` usable rows.

        Returns
        -------
        :class:`BaseModel`
            A model whose spec is the selected subset, in selection order.
    """
    if max_terms < 1:
        raise ContractViolation(f"Expected `max_terms` to be positive, instead found {max_terms}")
    validate_nonnegative("ridge", ridge)
    matrix, targets, _ = design_matrix(dataset.frame, spec)
    _check_rows(len(targets), len(spec), dataset.room_id)
    selected = forward_selection(matrix, targets, max_terms, ridge)

    control = [j for j, feature in enumerate(spec.features) if feature.role is Role.CURRENT_CONTROL]
    if require_control and control and not any(j in control for j in selected):
        residuals = {j: _solve_ridge(matrix[:, selected + [j]], targets, ridge)[2] for j in control}
        selected.append(min(residuals, key=residuals.get))

    subset = spec.subset(selected)
    coefficients, intercept, rss = _solve_ridge(matrix[:, selected], targets, ridge)
    logger.debug(
        "Room %s: dictionary model with %s (MSE %.4g)",
        dataset.room_id, ", ".join(subset.names) or "intercept only", rss / len(targets),
    )
    return BaseModel(subset, coefficients, intercept, "dict", dataset.room_id, dataset.period)


def fit_room(
        dataset: RoomDataset,
        method: str,
        lookback: int,
        max_terms: int = 8,
        ridge: float = DEFAULT_RIDGE,
    ) -> BaseModel:
    """ Fits the default model of `method` (`"mlr"` or `"dict"`) to one room. """
    validate_choice("method", method, METHODS)
    if method == "mlr":
        return fit_least_squares(dataset, FeatureSpec.default_mlr(lookback), ridge)
    return fit_dictionary_regression(
        dataset, FeatureSpec.default_dictionary(lookback), max_terms, ridge, require_control=True
    )


@dataclass(frozen=True, eq=False)
class ModelLibrary:
    """ Ordered base models with dense ids `0 .. N-1`.

        The order is part of the contract: selection and weight vectors
        index into it.
    """

    models: tuple[BaseModel, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        models = tuple(replace(model, id=i) for i, model in enumerate(self.models))
        object.__setattr__(self, "models", models)

    def __len__(self) -> int:
        return len(self.models)

    def __getitem__(self, index: int) -> BaseModel:
        return self.models[index]

    def __iter__(self) -> Iterator[BaseModel]:
        return iter(self.models)

    @property
    def lookback(self) -> int:
        """ :class:`int`: The longest look-back of any model. """
        return max((model.lookback for model in self.models), default=1)

    def truncated(self, size: int) -> "ModelLibrary":
        """ Keeps the first `size` models; `0` keeps them all. """
        return self if size <= 0 else ModelLibrary(self.models[:size])

    def variable_counts(self, mode: str = "variables") -> np.ndarray:
        return np.array([variable_count(model, mode) for model in self.models], dtype=float)

    def predict(self, window: TimeSeriesWindow, u_t: float) -> np.ndarray:
        """ Predictions of every model for one window. """
        return np.array([model_predict(model, window, u_t) for model in self.models])

    def predict_frame(self, frame: pd.DataFrame, start: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """ Evaluates every model at every step of a dataset frame.

            Returns
            -------
            tuple[:class:`numpy.ndarray`, :class:`numpy.ndarray`, :class:`numpy.ndarray`]
                Predictions of shape (steps, N), the next-step truths and the
                step indices `t`.
        """
        start = self.lookback - 1 if start is None else start
        columns, truths, rows = [], None, None
        for model in self.models:
            matrix, truths, rows = design_matrix(frame, model.spec, start)
            columns.append(model.intercept + matrix @ model.coefficients)
        if not columns:
            raise ContractViolation("Cannot predict with an empty model library")
        return np.stack(columns, axis=1), truths, rows

    def to_list(self) -> list[dict]:
        return [model.to_dict() for model in self.models]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_list(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ModelLibrary":
        documents = json.loads(Path(path).read_text())
        return cls(tuple(BaseModel.from_dict(document) for document in documents))


def build_library(
        datasets: Iterable[RoomDataset],
        methods: Sequence[str] = METHODS,
        lookback: int = 8,
        max_terms: int = 8,
        ridge: float = DEFAULT_RIDGE,
    ) -> ModelLibrary:
    """ Fits one model per room and method, ordered room by room. """
    models = []
    for dataset in datasets:
        for method in methods:
            model = fit_room(dataset, method, lookback, max_terms, ridge)
            if not model.spec.controllable:
                raise FittingError(f"The {method} model of room '{dataset.room_id}' ignores the control input")
            models.append(model)
    logger.info("Fitted %d base models", len(models))
    return ModelLibrary(tuple(models))
