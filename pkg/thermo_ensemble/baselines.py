#
# baselines.py
#

import logging
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .base_models import ModelLibrary
from .errors import ConfigError, ContractViolation
from .features import TimeSeriesWindow
from .simulator import RoomDataset

logger = logging.getLogger(__name__)


class BaselineConfig(BaseModel):
    """ Settings of the reference ensembles. """

    model_config = ConfigDict(frozen=True, extra="forbid")

    strategies: list[Literal[
        "heuristic_top_n", "equal_weight_all", "best_single_oracle", "static_search", "single_tier_rl"
    ]] = ["heuristic_top_n", "equal_weight_all", "static_search", "single_tier_rl", "best_single_oracle"]
    top_n: int = Field(3, ge=1)
    search_budget: int = Field(2000, ge=0)
    seed: int = 0


def heuristic_top_n(errors: np.ndarray, n: int) -> np.ndarray:
    """ Equal weights on the `n` models with the smallest errors.

        Ties go to the lowest model id.

        Raises
        ------
        ContractViolation
            `n` is not within [1, N].
    """
    errors = np.asarray(errors, dtype=float)
    if not 1 <= n <= len(errors):
        raise ContractViolation(f"Expected 1 <= n <= {len(errors)}, instead found {n}")
    w = np.zeros(len(errors))
    w[np.argsort(errors, kind="stable")[:n]] = 1.0 / n
    return w


def uniform_weights(n_models: int) -> np.ndarray:
    return np.full(n_models, 1.0 / n_models)


class FixedWeights:
    """ A policy that always answers with the same weights. """

    def __init__(self, w: np.ndarray) -> None:
        self.w = np.asarray(w, dtype=float)
        self.b = (self.w > 0).astype(float)

    def act(self, window: TimeSeriesWindow, errors: np.ndarray, rng=None) -> tuple[np.ndarray, np.ndarray]:
        return self.b, self.w


class HeuristicTopN:
    """ Averages the `n` models that were best at the previous step.

        The first step has no previous errors and uses equal weights on all models.
    """

    def __init__(self, n_models: int, n: int = 3) -> None:
        self.n_models = n_models
        self.n = min(n, n_models)
        self._started = False

    def act(self, window: TimeSeriesWindow, errors: np.ndarray, rng=None) -> tuple[np.ndarray, np.ndarray]:
        if not self._started:
            self._started = True
            w = uniform_weights(self.n_models)
        else:
            w = heuristic_top_n(errors, self.n)
        return (w > 0).astype(float), w


def equal_weight_all(n_models: int) -> FixedWeights:
    return FixedWeights(uniform_weights(n_models))


def static_search_weights(
        validation: RoomDataset,
        library: ModelLibrary,
        budget: int,
        seed: int,
    ) -> np.ndarray:
    """ Random search for the fixed weights with the lowest validation MSE.

        Candidates are the uniform vector followed by `budget` draws from a
        flat Dirichlet; the first candidate wins ties.

        Raises
        ------
        ConfigError
            The validation stream has no complete step.

        Returns
        -------
        :class:`numpy.ndarray`
            The best candidate.
    """
    if len(validation) < library.lookback + 1:
        raise ConfigError(
            f"Validation stream of room '{validation.room_id}' is too short for static search",
            keys=("baselines.search_budget",),
        )
    predictions, truths, _ = library.predict_frame(validation.frame)
    rng = np.random.default_rng(seed)
    n_models = len(library)
    candidates = np.vstack([uniform_weights(n_models)[None, :], rng.dirichlet(np.ones(n_models), size=budget)])
    mse = ((predictions @ candidates.T - truths[:, None]) ** 2).mean(axis=0)
    best = int(np.argmin(mse))
    logger.debug("Room %s: static search MSE %.4g (candidate %d)", validation.room_id, mse[best], best)
    return candidates[best]


def best_single_oracle(dataset: RoomDataset, library: ModelLibrary) -> FixedWeights:
    """ All weight on the model with the lowest MSE on `dataset` itself, in hindsight. """
    predictions, truths, _ = library.predict_frame(dataset.frame)
    mse = ((predictions - truths[:, None]) ** 2).mean(axis=0)
    w = np.zeros(len(library))
    w[int(np.argmin(mse))] = 1.0
    return FixedWeights(w)
