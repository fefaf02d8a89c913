#
# agents.py
#

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .autodiff import (
    ComputationTape, ParameterSet, Tensor, as_tensor, backward, clamp, concat, exp,
    gammaln, log_sigmoid, relu,
)
from .encoder import Encoder, EncoderConfig, NormalizationStats
from .errors import ContractViolation
from .features import TimeSeriesWindow
from .layers import add_dense, dense
from .optim import Optimizer
from .validate import validate_nonnegative

logger = logging.getLogger(__name__)

C_MIN = 0.05
C_MAX = 50.0
# Lower bound on weights inside the Dirichlet log-density
WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class HighAction:
    """ Model selection `b` and its log-probability under the high-level policy. """

    b: np.ndarray
    log_prob: float
    probabilities: np.ndarray
    guarded: bool = False


@dataclass(frozen=True)
class LowAction:
    """ Ensemble weights `w` and their log-probability under the low-level policy. """

    w: np.ndarray
    log_prob: float
    concentrations: np.ndarray


@dataclass(frozen=True)
class RewardBreakdown:
    r_loss: float = 0.0
    r_mod: float = 0.0
    r_var: float = 0.0
    r_base: float = 0.0
    r_h: float = 0.0
    r_l: float = 0.0

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in ("r_loss", "r_mod", "r_var", "r_base", "r_h", "r_l")}


#
# Policy networks
#

def init_policy(
        prefix: str,
        n_inputs: int,
        hidden: int,
        n_models: int,
        rng: np.random.Generator,
    ) -> ParameterSet:
    """ A two-layer network `n_inputs -> hidden -> n_models` under `prefix`. """
    params = ParameterSet()
    add_dense(params, f"{prefix}.hidden", n_inputs, hidden, rng)
    add_dense(params, f"{prefix}.out", hidden, n_models, rng)
    return params


def policy_logits(inputs, params: ParameterSet, prefix: str) -> Tensor:
    return dense(relu(dense(as_tensor(inputs), params, f"{prefix}.hidden")), params, f"{prefix}.out")


def bernoulli_log_prob(logits, b: np.ndarray) -> Tensor:
    """ Sum over models of `log Bernoulli(b_i; sigmoid(logit_i))`, per row. """
    logits = as_tensor(logits)
    b = np.asarray(b, dtype=float)
    return (log_sigmoid(logits) * b + log_sigmoid(-logits) * (1.0 - b)).sum(axis=-1)


def guard_selection(b: np.ndarray, probabilities: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ Forces the most probable model into every empty selection.

        Returns the guarded selections and a flag per row telling whether the
        guard fired.
    """
    b = np.array(b, dtype=float, copy=True)
    empty = b.sum(axis=-1) == 0
    if np.any(empty):
        rows = np.flatnonzero(empty)
        b[rows, probabilities[rows].argmax(axis=-1)] = 1.0
    return b, empty


def draw_selection(
        probabilities: np.ndarray,
        mode: str,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
    """ Samples (or thresholds at 0.5, in `"greedy"` mode) and guards selections. """
    match mode:
        case "sample":
            b = (rng.random(probabilities.shape) < probabilities).astype(float)
        case "greedy":
            b = (probabilities > 0.5).astype(float)
        case _:
            raise ContractViolation(f"Unknown selection mode '{mode}'")
    return guard_selection(b, probabilities)


def concentrations(logits, c_min: float = C_MIN, c_max: float = C_MAX) -> Tensor:
    """ `exp(logit)` clamped to [`c_min`, `c_max`]. """
    return exp(clamp(logits, np.log(c_min), np.log(c_max)))


def dirichlet_log_prob(conc, w: np.ndarray, b: np.ndarray) -> Tensor:
    """ Log-density of `w` under a Dirichlet over the selected coordinates.

        Unselected coordinates are excluded; with a single selected model the
        distribution is a point mass and the log-density is `0`.
    """
    conc = as_tensor(conc)
    mask = np.asarray(b, dtype=float)
    alpha = conc * mask + (1.0 - mask)
    log_w = np.log(np.maximum(np.asarray(w, dtype=float), WEIGHT_FLOOR)) * mask
    total = alpha.sum(axis=-1) - (1.0 - mask).sum(axis=-1)
    return gammaln(total) - gammaln(alpha).sum(axis=-1) + ((alpha - 1.0) * log_w).sum(axis=-1)


def draw_weights(
        conc: np.ndarray,
        b: np.ndarray,
        mode: str,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
    """ Samples Dirichlet weights (or takes the mean, in `"mean"` mode) over each selection.

        Raises
        ------
        ContractViolation
            Some selection is empty.
    """
    mask = np.asarray(b, dtype=float)
    if np.any(mask.sum(axis=-1) == 0):
        raise ContractViolation("The low-level policy needs at least one selected model")
    match mode:
        case "sample":
            draws = rng.gamma(np.where(mask > 0, conc, 1.0)) * mask
        case "mean":
            draws = conc * mask
        case _:
            raise ContractViolation(f"Unknown weighting mode '{mode}'")
    totals = draws.sum(axis=-1, keepdims=True)
    # Every gamma draw of a row can underflow to zero
    draws = np.where(totals > 0, draws, mask)
    return draws / draws.sum(axis=-1, keepdims=True)


def sample_high_action(
        state: np.ndarray,
        params: ParameterSet,
        mode: str = "sample",
        rng: np.random.Generator | None = None,
        prefix: str = "high",
    ) -> HighAction:
    """ Selects models from one state vector.

        Parameters
        ----------
        state: :class:`numpy.ndarray`
            The state `s`.
        params: :class:`ParameterSet`
            The high-level policy.
        mode: :class:`str`
            `"sample"` draws independent Bernoullis; `"greedy"` thresholds at 0.5.
        rng: :class:`numpy.random.Generator` | `None`
            Required in `"sample"` mode.

        Returns
        -------
        :class:`HighAction`
            A non-empty selection; the log-probability is that of the
            selection actually returned, after the empty-selection guard.
    """
    logits = policy_logits(np.asarray(state, dtype=float)[None, :], params, prefix)
    probabilities = special.expit(logits.values)
    b, guarded = draw_selection(probabilities, mode, rng)
    return HighAction(b[0], bernoulli_log_prob(logits, b).item(), probabilities[0], bool(guarded[0]))


def sample_low_action(
        state: np.ndarray,
        b: np.ndarray,
        params: ParameterSet,
        mode: str = "sample",
        rng: np.random.Generator | None = None,
        c_min: float = C_MIN,
        c_max: float = C_MAX,
        prefix: str = "low",
    ) -> LowAction:
    """ Weights the selected models from one state vector and selection.

        Raises
        ------
        ContractViolation
            The selection is empty.

        Returns
        -------
        :class:`LowAction`
            Weights on the simplex, exactly `0` off the selection.
    """
    b = np.asarray(b, dtype=float)[None, :]
    if b.sum() == 0:
        raise ContractViolation("The low-level policy needs at least one selected model")
    inputs = np.concatenate([np.asarray(state, dtype=float)[None, :], b], axis=1)
    conc = concentrations(policy_logits(inputs, params, prefix), c_min, c_max)
    w = draw_weights(conc.values, b, mode, rng)
    return LowAction(w[0], dirichlet_log_prob(conc, w, b).item(), conc.values[0])


#
# Rewards
#

def compute_high_reward(
        loss_ens: float,
        b: np.ndarray,
        variable_counts: np.ndarray,
        alpha: float = 0.005,
        beta: float = 0.0015,
    ) -> RewardBreakdown:
    """ Loss reward penalised by the number of models and of their variables. """
    validate_nonnegative("loss_ens", loss_ens)
    b = np.asarray(b, dtype=float)
    r_loss = -float(loss_ens)
    r_mod = -float(b.sum())
    r_var = -float(b @ np.asarray(variable_counts, dtype=float))
    return RewardBreakdown(r_loss=r_loss, r_mod=r_mod, r_var=r_var, r_h=r_loss + alpha * r_mod + beta * r_var)


def compute_low_reward(loss_ens: float, loss_equal: float) -> RewardBreakdown:
    """ Loss reward relative to equal weighting of the same selection. """
    validate_nonnegative("loss_ens", loss_ens)
    validate_nonnegative("loss_equal", loss_equal)
    return RewardBreakdown(r_loss=-float(loss_ens), r_base=-float(loss_equal), r_l=float(loss_equal) - float(loss_ens))


def reward_breakdown(
        loss_ens: float,
        loss_equal: float,
        b: np.ndarray,
        variable_counts: np.ndarray,
        alpha: float = 0.005,
        beta: float = 0.0015,
    ) -> RewardBreakdown:
    high = compute_high_reward(loss_ens, b, variable_counts, alpha, beta)
    low = compute_low_reward(loss_ens, loss_equal)
    return RewardBreakdown(high.r_loss, high.r_mod, high.r_var, low.r_base, high.r_h, low.r_l)


#
# Updates
#

def surrogate_objective(log_probs: Tensor, rewards: np.ndarray) -> Tensor:
    """ `mean(log_prob * reward)`, the rewards held constant. """
    return (log_probs * np.asarray(rewards, dtype=float)).mean()


def soft_blend(new: ParameterSet, old: ParameterSet, blend: float) -> ParameterSet:
    """ Returns `blend * new + (1 - blend) * old`, parameter by parameter.

        Raises
        ------
        ContractViolation
            The sets differ in names or shapes, or `blend` lies outside [0, 1].
    """
    if not 0.0 <= blend <= 1.0:
        raise ContractViolation(f"Expected a blend factor in [0, 1], instead found {blend}")
    if list(new) != list(old):
        raise ContractViolation("Cannot blend parameter sets with different names")
    blended = ParameterSet()
    for name, tensor in new.items():
        if tensor.shape != old[name].shape:
            raise ContractViolation(f"Cannot blend '{name}': shapes {tensor.shape} and {old[name].shape}")
        blended.add(name, blend * tensor.values + (1.0 - blend) * old[name].values)
    return blended


def reinforce_step(
        objective: Callable[[], Tensor],
        params: Sequence[ParameterSet],
        optimizer: Optimizer,
        blend: float,
    ) -> float:
    """ One REINFORCE ascent step followed by soft blending, in place.

        Parameters
        ----------
        objective: Callable[[], :class:`Tensor`]
            Builds the scalar surrogate from the current parameters.
        params: Sequence[:class:`ParameterSet`]
            Every set that receives the update.
        optimizer: :class:`Optimizer`
            Proposes the new parameters from the gradients.
        blend: :class:`float`
            Weight of the proposal in the blended parameters.

        Raises
        ------
        NumericError
            A gradient is not finite.

        Returns
        -------
        :class:`float`
            The surrogate value before the update.
    """
    with ComputationTape() as tape:
        value = objective()
    grads = backward(tape, value, params)
    for param_set in params:
        param_set.assign(soft_blend(optimizer.proposal(param_set, grads), param_set, blend))
    return value.item()


#
# Agents
#

class HierarchicalAgent:
    """ Shared encoder, model-selection policy and weighting policy.

        Parameters
        ----------
        encoder: :class:`Encoder`
            Builds the state from the window and the last model errors.
        high: :class:`ParameterSet`
            Maps the state to one selection logit per model.
        low: :class:`ParameterSet`
            Maps the state and the selection to one concentration logit per model.
        c_min, c_max: :class:`float`
            Clamp of the Dirichlet concentrations.
    """

    def __init__(
            self,
            encoder: Encoder,
            high: ParameterSet,
            low: ParameterSet,
            c_min: float = C_MIN,
            c_max: float = C_MAX,
        ) -> None:
        self.encoder = encoder
        self.high = high
        self.low = low
        self.c_min = c_min
        self.c_max = c_max
        self.guarded_steps = 0

    @classmethod
    def initialize(
            cls,
            config: EncoderConfig,
            n_models: int,
            seed: int,
            stats: NormalizationStats | None = None,
            c_min: float = C_MIN,
            c_max: float = C_MAX,
        ) -> "HierarchicalAgent":
        rng = np.random.default_rng(seed)
        encoder = Encoder.initialize(config, n_models, rng, stats)
        high = init_policy("high", config.state_size, config.hidden, n_models, rng)
        low = init_policy("low", config.state_size + n_models, config.hidden, n_models, rng)
        return cls(encoder, high, low, c_min, c_max)

    @property
    def n_models(self) -> int:
        return self.encoder.n_models

    @property
    def params(self) -> list[ParameterSet]:
        return [self.encoder.params, self.high, self.low]

    def high_logits(self, states) -> Tensor:
        return policy_logits(states, self.high, "high")

    def low_concentrations(self, states, b: np.ndarray) -> Tensor:
        inputs = concat([as_tensor(states), as_tensor(b)], axis=-1)
        return concentrations(policy_logits(inputs, self.low, "low"), self.c_min, self.c_max)

    def act(
            self,
            window: TimeSeriesWindow,
            errors: np.ndarray,
            rng: np.random.Generator | None = None,
            mode: str = "greedy",
        ) -> tuple[np.ndarray, np.ndarray]:
        """ Selects and weights models for one step.

            `mode="greedy"` thresholds the selection and takes the Dirichlet
            mean; `mode="sample"` draws both actions from `rng`.
        """
        state = self.encoder.encode(
            window.x[None, :], window.u[None, :], window.d[None, :, :], np.asarray(errors)[None, :]
        ).values[0]
        high = sample_high_action(state, self.high, "greedy" if mode == "greedy" else "sample", rng)
        self.guarded_steps += high.guarded
        low = sample_low_action(
            state, high.b, self.low, "mean" if mode == "greedy" else "sample", rng, self.c_min, self.c_max
        )
        return high.b, low.w

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.encoder.save(directory / "encoder.json")
        self.high.save(directory / "high.json")
        self.low.save(directory / "low.json")

    @classmethod
    def load(cls, directory: str | Path, c_min: float = C_MIN, c_max: float = C_MAX) -> "HierarchicalAgent":
        directory = Path(directory)
        return cls(
            Encoder.load(directory / "encoder.json"),
            ParameterSet.load(directory / "high.json"),
            ParameterSet.load(directory / "low.json"),
            c_min,
            c_max,
        )


class SingleTierAgent:
    """ One Dirichlet weighting policy over every model, without a selection stage. """

    def __init__(self, encoder: Encoder, policy: ParameterSet, c_min: float = C_MIN, c_max: float = C_MAX) -> None:
        self.encoder = encoder
        self.policy = policy
        self.c_min = c_min
        self.c_max = c_max

    @classmethod
    def initialize(
            cls,
            config: EncoderConfig,
            n_models: int,
            seed: int,
            stats: NormalizationStats | None = None,
            c_min: float = C_MIN,
            c_max: float = C_MAX,
        ) -> "SingleTierAgent":
        rng = np.random.default_rng(seed)
        encoder = Encoder.initialize(config, n_models, rng, stats, prefix="single_encoder")
        policy = init_policy("single", config.state_size, config.hidden, n_models, rng)
        return cls(encoder, policy, c_min, c_max)

    @property
    def n_models(self) -> int:
        return self.encoder.n_models

    @property
    def params(self) -> list[ParameterSet]:
        return [self.encoder.params, self.policy]

    def concentrations(self, states) -> Tensor:
        return concentrations(policy_logits(states, self.policy, "single"), self.c_min, self.c_max)

    def act(
            self,
            window: TimeSeriesWindow,
            errors: np.ndarray,
            rng: np.random.Generator | None = None,
            mode: str = "greedy",
        ) -> tuple[np.ndarray, np.ndarray]:
        state = self.encoder.encode(
            window.x[None, :], window.u[None, :], window.d[None, :, :], np.asarray(errors)[None, :]
        ).values[0]
        w = single_tier_policy_step(state, self.policy, "mean" if mode == "greedy" else "sample", rng, self.c_min, self.c_max)
        return np.ones(self.n_models), w

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.encoder.save(directory / "single_tier_encoder.json")
        self.policy.save(directory / "single_tier.json")

    @classmethod
    def load(cls, directory: str | Path, c_min: float = C_MIN, c_max: float = C_MAX) -> "SingleTierAgent":
        directory = Path(directory)
        return cls(
            Encoder.load(directory / "single_tier_encoder.json"),
            ParameterSet.load(directory / "single_tier.json"),
            c_min,
            c_max,
        )


def single_tier_policy_step(
        state: np.ndarray,
        params: ParameterSet,
        mode: str = "mean",
        rng: np.random.Generator | None = None,
        c_min: float = C_MIN,
        c_max: float = C_MAX,
    ) -> np.ndarray:
    """ Weights over all models from one state vector. """
    conc = concentrations(policy_logits(np.asarray(state, dtype=float)[None, :], params, "single"), c_min, c_max)
    n_models = conc.shape[-1]
    return draw_weights(conc.values, np.ones((1, n_models)), mode, rng)[0]
