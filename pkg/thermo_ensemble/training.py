#
# training.py
#

import logging
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import special

from .agents import (
    HierarchicalAgent, SingleTierAgent, bernoulli_log_prob, dirichlet_log_prob, draw_selection,
    draw_weights, reinforce_step, surrogate_objective,
)
from .autodiff import Tensor
from .base_models import ModelLibrary
from .encoder import EncoderConfig, NormalizationStats
from .errors import ConfigError
from .optim import make_optimizer
from .simulator import DISTURBANCE_COLUMNS, RoomDataset

logger = logging.getLogger(__name__)

TRACKER_PRIOR = 1.0
LOG_COLUMNS = ("epoch", "stage", "mean_r_loss", "mean_r_mod", "mean_r_var", "mean_r_base", "mean_r_h", "mean_r_l")


class TrainConfig(BaseModel):
    """ Hyperparameters of agent training. """

    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha: float = Field(0.005, ge=0)
    beta: float = Field(0.0015, ge=0)
    blend: float = Field(0.001, ge=0, le=1)
    gamma: float = Field(0.0, ge=0, le=0)
    lr_stage1: float = Field(0.001, gt=0)
    lr_stage2: float = Field(0.0005, gt=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    batch_size: int = Field(64, gt=0)
    stage1_epochs: int = Field(20, ge=0)
    stage2_epochs: int = Field(20, ge=0)
    steps_per_epoch: int = Field(2048, gt=0)
    max_stage1_selection: int = Field(10, gt=0)
    c_min: float = Field(0.05, gt=0)
    c_max: float = Field(50.0, gt=0)
    hidden: int = Field(64, gt=0)
    representation: Literal["tcn", "dense"] = "tcn"
    error_embedding: Literal["rank", "raw"] = "rank"
    reward_design: Literal["hierarchical", "shared"] = "hierarchical"
    count_mode: Literal["variables", "terms"] = "variables"
    reward_baseline: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def _check_clamp(self) -> "TrainConfig":
        if self.c_max <= self.c_min:
            raise ValueError("c_max must exceed c_min")
        return self

    def encoder_config(self, lookback: int) -> EncoderConfig:
        return EncoderConfig(
            hidden=self.hidden,
            lookback=lookback,
            representation=self.representation,
            error_embedding=self.error_embedding,
        )


@dataclass(frozen=True)
class TrainingStreams:
    """ Every logged step of a set of rooms, with the library's predictions cached.

        Row `i` describes one step `t` of some room: the window ending at `t`,
        the logged control `u[t]`, the truth `x[t+1]`, every model's prediction
        and the per-model squared errors of step `t-1` (the prior at a room's
        first step).
    """

    x: np.ndarray
    u: np.ndarray
    d: np.ndarray
    errors: np.ndarray
    predictions: np.ndarray
    truths: np.ndarray

    def __len__(self) -> int:
        return len(self.truths)

    @classmethod
    def build(cls, datasets: Sequence[RoomDataset], library: ModelLibrary) -> "TrainingStreams":
        """ Raises :class:`ConfigError` when no dataset yields a single step. """
        lookback = library.lookback
        parts = []
        for dataset in datasets:
            frame = dataset.frame
            if len(frame) < lookback + 1:
                continue
            predictions, truths, rows = library.predict_frame(frame)
            squared = (predictions - truths[:, None]) ** 2
            errors = np.vstack([np.full((1, len(library)), TRACKER_PRIOR), squared[:-1]])
            t_room = frame["t_room"].to_numpy(dtype=float)
            u_hvac = frame["u_hvac"].to_numpy(dtype=float)
            disturbances = frame[list(DISTURBANCE_COLUMNS)].to_numpy(dtype=float)
            first = rows - (lookback - 1)
            parts.append((
                sliding_window_view(t_room, lookback)[first],
                sliding_window_view(u_hvac, lookback - 1)[first],
                np.moveaxis(sliding_window_view(disturbances, lookback, axis=0), -1, 1)[first],
                errors, predictions, truths,
            ))
        if not parts:
            raise ConfigError("No training stream has enough rows for a single step", keys=("training",))
        return cls(*(np.concatenate(arrays) for arrays in zip(*parts)))


def _ensemble_losses(predictions: np.ndarray, truths: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    loss_ens = ((predictions * w).sum(axis=1) - truths) ** 2
    equal = (predictions * b).sum(axis=1) / b.sum(axis=1)
    return loss_ens, (equal - truths) ** 2


def _centered(rewards: np.ndarray, enabled: bool) -> np.ndarray:
    return rewards - rewards.mean() if enabled else rewards


def random_selection(n_models: int, batch: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    """ Selections with a size uniform in [1, min(N, cap)] and a uniform subset of that size. """
    b = np.zeros((batch, n_models))
    sizes = rng.integers(1, min(n_models, cap) + 1, size=batch)
    for row, size in enumerate(sizes):
        b[row, rng.choice(n_models, size=size, replace=False)] = 1.0
    return b


@dataclass
class TrainingResult:
    agent: HierarchicalAgent
    log: pd.DataFrame


def train_two_stage(
        datasets: Sequence[RoomDataset],
        library: ModelLibrary,
        config: TrainConfig,
        streams: TrainingStreams | None = None,
    ) -> TrainingResult:
    """ Pre-trains the weighting policy, then trains both policies jointly.

        Stage 1 leaves the selection policy untouched: each step draws a random
        selection and only the encoder and the weighting policy are updated,
        with the low-level reward. Stage 2 samples the selection from the
        selection policy and updates all three parameter sets with the sum of
        both surrogates. Every update is a REINFORCE ascent step followed by
        soft blending.

        Parameters
        ----------
        datasets: Sequence[:class:`RoomDataset`]
            Streams of the training rooms.
        library: :class:`ModelLibrary`
            The base models.
        config: :class:`TrainConfig`
            Hyperparameters.
        streams: :class:`TrainingStreams` | `None`
            Prebuilt steps of `datasets`, if already available.

        Raises
        ------
        ConfigError
            No dataset yields a training step.

        Returns
        -------
        :class:`TrainingResult`
            The trained agent and one log row per epoch.
    """
    if streams is None:
        streams = TrainingStreams.build(datasets, library)
    stats = NormalizationStats.fit(dataset.frame for dataset in datasets)
    agent = HierarchicalAgent.initialize(
        config.encoder_config(library.lookback), len(library), config.seed, stats, config.c_min, config.c_max
    )
    rng = np.random.default_rng(config.seed + 1)
    counts = library.variable_counts(config.count_mode)
    log = []

    schedule = [(1, config.stage1_epochs, config.lr_stage1), (2, config.stage2_epochs, config.lr_stage2)]
    epoch = 0
    for stage, epochs, lr in schedule:
        optimizer = make_optimizer(config.optimizer, lr)
        for _ in range(epochs):
            sums = dict.fromkeys(LOG_COLUMNS[2:], 0.0)
            order = rng.permutation(len(streams))[: config.steps_per_epoch]
            for start in range(0, len(order), config.batch_size):
                index = order[start : start + config.batch_size]
                rewards = _train_batch(agent, streams, index, stage, counts, config, optimizer, rng)
                for name, values in rewards.items():
                    sums[name] += float(values.sum())
            means = {name: total / len(order) for name, total in sums.items()}
            log.append({"epoch": epoch, "stage": stage, **means})
            logger.info(
                "Epoch %d (stage %d): mean r_h %.4f, mean r_l %.5f",
                epoch, stage, means["mean_r_h"], means["mean_r_l"],
            )
            epoch += 1
    return TrainingResult(agent, pd.DataFrame(log, columns=list(LOG_COLUMNS)))


def _train_batch(
        agent: HierarchicalAgent,
        streams: TrainingStreams,
        index: np.ndarray,
        stage: int,
        counts: np.ndarray,
        config: TrainConfig,
        optimizer,
        rng: np.random.Generator,
    ) -> dict[str, np.ndarray]:
    predictions, truths = streams.predictions[index], streams.truths[index]
    rewards = {}

    def objective() -> Tensor:
        states = agent.encoder.encode(streams.x[index], streams.u[index], streams.d[index], streams.errors[index])
        if stage == 1:
            b = random_selection(agent.n_models, len(index), config.max_stage1_selection, rng)
        else:
            logits = agent.high_logits(states)
            b, _ = draw_selection(special.expit(logits.values), "sample", rng)
        conc = agent.low_concentrations(states, b)
        # Sampled actions enter the surrogate as constants
        w = draw_weights(conc.values, b, "sample", rng)

        loss_ens, loss_equal = _ensemble_losses(predictions, truths, w, b)
        r_mod = -b.sum(axis=1)
        r_var = -(b @ counts)
        r_h = -loss_ens + config.alpha * r_mod + config.beta * r_var
        r_l = loss_equal - loss_ens
        if config.reward_design == "shared":
            r_h = r_l = -loss_ens
        rewards.update({
            "mean_r_loss": -loss_ens, "mean_r_mod": r_mod, "mean_r_var": r_var,
            "mean_r_base": -loss_equal, "mean_r_h": r_h, "mean_r_l": r_l,
        })

        low = surrogate_objective(dirichlet_log_prob(conc, w, b), _centered(r_l, config.reward_baseline))
        if stage == 1:
            return low
        high = surrogate_objective(bernoulli_log_prob(logits, b), _centered(r_h, config.reward_baseline))
        return low + high

    params = [agent.encoder.params, agent.low] if stage == 1 else agent.params
    reinforce_step(objective, params, optimizer, config.blend)
    return rewards


@dataclass
class SingleTierResult:
    agent: SingleTierAgent
    log: pd.DataFrame


def train_single_tier(
        datasets: Sequence[RoomDataset],
        library: ModelLibrary,
        config: TrainConfig,
        streams: TrainingStreams | None = None,
    ) -> SingleTierResult:
    """ Trains one weighting policy over all models with the reward `-loss`.

        The schedule mirrors :func:`train_two_stage`: `stage1_epochs` at
        `lr_stage1`, then `stage2_epochs` at `lr_stage2`.
    """
    if streams is None:
        streams = TrainingStreams.build(datasets, library)
    stats = NormalizationStats.fit(dataset.frame for dataset in datasets)
    agent = SingleTierAgent.initialize(
        config.encoder_config(library.lookback), len(library), config.seed, stats, config.c_min, config.c_max
    )
    rng = np.random.default_rng(config.seed + 2)
    everything = np.ones(len(library))
    log = []

    epoch = 0
    for stage, epochs, lr in ((1, config.stage1_epochs, config.lr_stage1), (2, config.stage2_epochs, config.lr_stage2)):
        optimizer = make_optimizer(config.optimizer, lr)
        for _ in range(epochs):
            total = 0.0
            order = rng.permutation(len(streams))[: config.steps_per_epoch]
            for start in range(0, len(order), config.batch_size):
                index = order[start : start + config.batch_size]
                losses = []

                def objective() -> Tensor:
                    b = np.tile(everything, (len(index), 1))
                    states = agent.encoder.encode(
                        streams.x[index], streams.u[index], streams.d[index], streams.errors[index]
                    )
                    conc = agent.concentrations(states)
                    w = draw_weights(conc.values, b, "sample", rng)
                    loss, _ = _ensemble_losses(streams.predictions[index], streams.truths[index], w, b)
                    losses.append(loss)
                    reward = _centered(-loss, config.reward_baseline)
                    return surrogate_objective(dirichlet_log_prob(conc, w, b), reward)

                reinforce_step(objective, agent.params, optimizer, config.blend)
                total += float(losses[0].sum())
            mean_loss = total / len(order)
            log.append({
                "epoch": epoch, "stage": stage, "mean_r_loss": -mean_loss, "mean_r_mod": 0.0,
                "mean_r_var": 0.0, "mean_r_base": 0.0, "mean_r_h": 0.0, "mean_r_l": -mean_loss,
            })
            logger.info("Single-tier epoch %d: mean loss %.4f", epoch, mean_loss)
            epoch += 1
    return SingleTierResult(agent, pd.DataFrame(log, columns=list(LOG_COLUMNS)))
