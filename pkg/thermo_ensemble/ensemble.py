#
# ensemble.py
#

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
import pandas as pd

from .agents import RewardBreakdown, reward_breakdown
from .base_models import BaseModel, ModelLibrary, model_predict
from .errors import ContractViolation, EndOfStream
from .features import TimeSeriesWindow, design_matrix, window_at
from .simulator import RoomDataset
from .validate import validate_simplex

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ("timestamp", "room", "b_bitstring", "weights_json", "yhat", "ytrue", "sq_err")


class EnsemblePolicy(Protocol):
    """ Anything that selects and weights models from a window and the last errors. """

    def act(
            self,
            window: TimeSeriesWindow,
            errors: np.ndarray,
            rng: np.random.Generator | None = None,
        ) -> tuple[np.ndarray, np.ndarray]:
        ...


PolicyFactory = Callable[[RoomDataset], EnsemblePolicy]


@dataclass
class ErrorTracker:
    """ Squared error of every model at the previous step.

        Every model starts at the same prior, so the first state carries no
        ranking information.
    """

    n_models: int
    prior: float = 1.0
    errors: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.errors = np.full(self.n_models, self.prior, dtype=float)

    def update(self, squared_errors: np.ndarray) -> None:
        squared_errors = np.asarray(squared_errors, dtype=float)
        if squared_errors.shape != (self.n_models,):
            raise ContractViolation(f"Expected {self.n_models} errors, instead found {squared_errors.shape}")
        if np.any(squared_errors < 0):
            raise ContractViolation("Squared errors cannot be negative")
        self.errors = squared_errors.copy()


@dataclass(frozen=True)
class EnsembleRecord:
    """ Outcome of one ensemble step. """

    timestamp: pd.Timestamp
    room: str
    b: np.ndarray
    w: np.ndarray
    prediction: float
    truth: float
    squared_error: float
    rewards: RewardBreakdown = RewardBreakdown()

    def to_row(self) -> dict:
        return {
            "timestamp": self.timestamp.isoformat(),
            "room": self.room,
            "b_bitstring": "".join("1" if bit else "0" for bit in self.b),
            "weights_json": json.dumps(self.w.tolist()),
            "yhat": self.prediction,
            "ytrue": self.truth,
            "sq_err": self.squared_error,
        }


def ensemble_predict(library: ModelLibrary, w: np.ndarray, window: TimeSeriesWindow, u_t: float) -> float:
    """ Weighted sum of the library's predictions; zero-weight models are never evaluated.

        Raises
        ------
        ContractViolation
            `w` is not a probability vector over the library (tolerance 1e-6).
    """
    w = np.asarray(w, dtype=float)
    if len(w) != len(library):
        raise ContractViolation(f"Expected {len(library)} weights, instead found {len(w)}")
    validate_simplex("w", w)
    return sum(w[i] * model_predict(library[i], window, u_t) for i in np.flatnonzero(w))


class StreamCursor:
    """ Walks over the steps of one logged room stream.

        Predictions of the whole library are computed once on construction;
        step `t` runs from `L - 1` to the second-to-last row.
    """

    def __init__(self, dataset: RoomDataset, library: ModelLibrary) -> None:
        self.dataset = dataset
        self.library = library
        self.predictions, self.truths, self.rows = library.predict_frame(dataset.frame)
        self.position = 0

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def exhausted(self) -> bool:
        return self.position >= len(self.rows)

    @property
    def t(self) -> int:
        if self.exhausted:
            raise EndOfStream(f"Stream of room '{self.dataset.room_id}' is exhausted")
        return int(self.rows[self.position])

    def window(self) -> TimeSeriesWindow:
        return window_at(self.dataset.frame, self.t, self.library.lookback, self.dataset.sampling_minutes)

    @property
    def u_t(self) -> float:
        return float(self.dataset.frame["u_hvac"].iat[self.t])

    @property
    def timestamp(self) -> pd.Timestamp:
        return self.dataset.frame["timestamp"].iat[self.t]

    def advance(self) -> None:
        self.position += 1


def step_stream(
        cursor: StreamCursor,
        policy: EnsemblePolicy,
        tracker: ErrorTracker,
        variable_counts: np.ndarray | None = None,
        alpha: float = 0.005,
        beta: float = 0.0015,
        rng: np.random.Generator | None = None,
    ) -> EnsembleRecord:
    """ Runs one open-loop ensemble step on logged data.

        The policy sees the window ending at `t` and the tracker's errors from
        `t-1`; the ensemble predicts `x[t+1]` under the logged control and is
        scored against the logged truth. Only then does the tracker take each
        model's own squared error at `t`.

        Raises
        ------
        EndOfStream
            The cursor has no step left.
        ContractViolation
            The policy returned weights off the simplex.

        Returns
        -------
        :class:`EnsembleRecord`
            The step's actions, prediction, truth and rewards.
    """
    window = cursor.window()
    b, w = policy.act(window, tracker.errors.copy(), rng)
    validate_simplex("w", w)
    predictions = cursor.predictions[cursor.position]
    truth = float(cursor.truths[cursor.position])
    selected = np.flatnonzero(w)
    prediction = float(w[selected] @ predictions[selected])
    squared = (prediction - truth) ** 2

    chosen = np.flatnonzero(b)
    equal = float(predictions[chosen].mean())
    counts = np.zeros(len(w)) if variable_counts is None else variable_counts
    rewards = reward_breakdown(squared, (equal - truth) ** 2, b, counts, alpha, beta)

    record = EnsembleRecord(
        cursor.timestamp, cursor.dataset.room_id, np.asarray(b), np.asarray(w), prediction, truth, squared, rewards
    )
    tracker.update((predictions - truth) ** 2)
    cursor.advance()
    return record


def run_stream(
        dataset: RoomDataset,
        policy: EnsemblePolicy,
        library: ModelLibrary,
        variable_counts: np.ndarray | None = None,
        alpha: float = 0.005,
        beta: float = 0.0015,
    ) -> list[EnsembleRecord]:
    """ Steps a fresh cursor and tracker through a whole room stream. """
    cursor = StreamCursor(dataset, library)
    tracker = ErrorTracker(len(library))
    records = []
    while not cursor.exhausted:
        records.append(step_stream(cursor, policy, tracker, variable_counts, alpha, beta))
    guarded = getattr(policy, "guarded_steps", 0)
    if guarded:
        logger.warning("Room %s: %d steps selected no model and fell back to the most probable one", dataset.room_id, guarded)
    return records


def records_frame(records: Sequence[EnsembleRecord]) -> pd.DataFrame:
    return pd.DataFrame([record.to_row() for record in records], columns=list(RECORD_COLUMNS))


def reference_records(dataset: RoomDataset, model: BaseModel, lookback: int) -> pd.DataFrame:
    """ Records of a single fixed model over the same steps an ensemble is scored on. """
    matrix, truths, rows = design_matrix(dataset.frame, model.spec, lookback - 1)
    predictions = model.intercept + matrix @ model.coefficients
    stamps = dataset.frame["timestamp"].iloc[rows]
    return pd.DataFrame({
        "timestamp": [stamp.isoformat() for stamp in stamps],
        "room": dataset.room_id,
        "b_bitstring": "1",
        "weights_json": json.dumps([1.0]),
        "yhat": predictions,
        "ytrue": truths,
        "sq_err": (predictions - truths) ** 2,
    }, columns=list(RECORD_COLUMNS))


def run_evaluation(
        datasets: Sequence[RoomDataset],
        methods: Mapping[str, PolicyFactory],
        library: ModelLibrary,
        variable_counts: np.ndarray | None = None,
        alpha: float = 0.005,
        beta: float = 0.0015,
    ) -> dict[str, pd.DataFrame]:
    """ Evaluates every method on every test stream, greedily and without updates.

        Parameters
        ----------
        datasets: Sequence[:class:`RoomDataset`]
            The evaluation streams.
        methods: Mapping[:class:`str`, PolicyFactory]
            Builds each method's policy for a given room.
        library: :class:`ModelLibrary`
            The base models.

        Returns
        -------
        dict[:class:`str`, :class:`pandas.DataFrame`]
            The record log of each method, rooms in order.
    """
    results = {}
    for name, factory in methods.items():
        frames = []
        for dataset in datasets:
            records = run_stream(dataset, factory(dataset), library, variable_counts, alpha, beta)
            frames.append(records_frame(records))
        results[name] = pd.concat(frames, ignore_index=True)
        logger.info(
            "Evaluated %s on %d rooms: MAE %.4f",
            name, len(datasets), float(np.sqrt(results[name]["sq_err"]).mean()),
        )
    return results
