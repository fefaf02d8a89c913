#
# mpc.py
#

import itertools
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Literal, Protocol, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel as ConfigModel, ConfigDict, Field, model_validator

from .base_models import BaseModel, ModelLibrary, model_predict
from .ensemble import ErrorTracker, EnsemblePolicy
from .errors import ContractViolation, ControllerError, NumericError
from .features import TimeSeriesWindow
from .simulator import (
    DISTURBANCE_COLUMNS, SUBSTEP, ExogenousConfig, ExogenousSample, RoomParams, RoomState,
    step_room, synthesize_exogenous,
)

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("timestamp", "t_room", "u_chosen", "j_comfort", "j_consume", "p_e", "energy_kwh_cum")
SOURCES = ("base", "ensemble", "oracle", "thermostat")

Predictor = Callable[[TimeSeriesWindow, float], float]


class MpcConfig(ConfigModel):
    """ Objective, constraints and candidate controls of the receding-horizon controller. """

    model_config = ConfigDict(frozen=True, extra="forbid")

    setpoint: float = 20.0
    band: float = Field(2.0, gt=0)
    comfort_start: float = Field(10.0, ge=0, lt=24)
    comfort_end: float = Field(20.0, gt=0, le=24)
    preheat_hours: float = Field(2.0, ge=0)
    comfort_weight: float = Field(100.0, ge=0)
    energy_weight: float = Field(1.0, ge=0)
    penalty_weight: float = Field(1000.0, ge=0)
    t_min: float = 10.0
    t_max: float = 30.0
    u_max: float | None = Field(None, gt=0)
    horizon: int = Field(1, ge=1)
    candidates: list[float] = [float(u) for u in range(0, 4001, 500)]
    days: int = Field(4, ge=1)
    sources: list[Literal["base", "ensemble", "oracle", "thermostat"]] = list(SOURCES)
    base_model: int = Field(0, ge=0)
    rooms: int = Field(1, ge=1)
    thermostat_hysteresis: float = Field(0.5, ge=0)

    @model_validator(mode="after")
    def _check_candidates(self) -> "MpcConfig":
        if not self.candidates or 0.0 not in self.candidates:
            raise ValueError("candidates must be non-empty and include 0")
        if any(u < 0 for u in self.candidates):
            raise ValueError("candidates must be non-negative")
        if self.t_max <= self.t_min:
            raise ValueError("t_max must exceed t_min")
        return self

    def weighs_comfort(self, timestamp: pd.Timestamp) -> bool:
        """ Whether comfort is priced at `timestamp`, including the pre-heat lead. """
        hour = timestamp.hour + timestamp.minute / 60.0
        return self.comfort_start - self.preheat_hours <= hour < self.comfort_end

    def in_comfort_window(self, timestamp: pd.Timestamp) -> bool:
        hour = timestamp.hour + timestamp.minute / 60.0
        return self.comfort_start <= hour < self.comfort_end


@dataclass(frozen=True)
class ObjectiveTerms:
    j_comfort: float = 0.0
    j_consume: float = 0.0
    p_e: float = 0.0

    @property
    def total(self) -> float:
        return self.j_comfort + self.j_consume + self.p_e


@dataclass(frozen=True)
class ControlDecision:
    """ The first control of the best candidate sequence and its predicted outcome. """

    u: float
    trajectory: tuple[float, ...] = ()
    terms: ObjectiveTerms = ObjectiveTerms()
    fallback: bool = False

    @property
    def j(self) -> float:
        return self.terms.total


def evaluate_objective(
        temps: Sequence[float],
        controls: Sequence[float],
        timestamps: Sequence[pd.Timestamp],
        config: MpcConfig,
        sampling_minutes: int = 15,
        u_max: float | None = None,
    ) -> ObjectiveTerms:
    """ Prices a predicted trajectory.

        Comfort costs `comfort_weight` per squared degree outside the band
        while comfort is priced; consumption costs `energy_weight` per kWh;
        every degree outside [t_min, t_max] and every kW above `u_max` costs
        `penalty_weight`.

        Parameters
        ----------
        temps: Sequence[:class:`float`]
            Predicted temperatures at the `timestamps`.
        controls: Sequence[:class:`float`]
            Powers (W) held over the interval before each temperature.
        timestamps: Sequence[:class:`pandas.Timestamp`]
            Times of the temperatures.
        config: :class:`MpcConfig`
            Weights and limits.
        sampling_minutes: :class:`int`
            Length of each interval.
        u_max: :class:`float` | `None`
            Power limit; `config.u_max` (or no limit) when omitted.

        Raises
        ------
        ContractViolation
            The sequences differ in length.

        Returns
        -------
        :class:`ObjectiveTerms`
            The three non-negative terms.
    """
    if not len(temps) == len(controls) == len(timestamps):
        raise ContractViolation("Temperatures, controls and timestamps must have the same length")
    u_max = u_max if u_max is not None else config.u_max
    hours = sampling_minutes / 60.0
    comfort = consume = penalty = 0.0
    for temp, u, timestamp in zip(temps, controls, timestamps):
        if config.weighs_comfort(timestamp):
            comfort += max(0.0, abs(temp - config.setpoint) - config.band) ** 2
        consume += u * hours / 1000.0
        penalty += max(0.0, temp - config.t_max) + max(0.0, config.t_min - temp)
        if u_max is not None:
            penalty += max(0.0, u - u_max) / 1000.0
    return ObjectiveTerms(
        config.comfort_weight * comfort, config.energy_weight * consume, config.penalty_weight * penalty
    )


def advance_window(window: TimeSeriesWindow, prediction: float, u: float) -> TimeSeriesWindow:
    """ Shifts the window one step, holding the last disturbances. """
    timestamps = None
    if window.timestamps is not None:
        step = pd.Timedelta(minutes=window.sampling_minutes)
        timestamps = window.timestamps[1:].append(pd.DatetimeIndex([window.timestamps[-1] + step]))
    return TimeSeriesWindow(
        x=np.append(window.x[1:], prediction),
        u=np.append(window.u[1:], u) if len(window.u) else window.u,
        d=np.vstack([window.d[1:], window.d[-1:]]),
        sampling_minutes=window.sampling_minutes,
        timestamps=timestamps,
        disturbance_names=window.disturbance_names,
    )


class Model(Protocol):
    def rollout(self, window: TimeSeriesWindow, controls: Sequence[float]) -> list[float]:
        ...


@dataclass
class WindowModel:
    """ Rolls a one-step predictor forward by feeding its predictions back into the window. """

    predictor: Predictor

    def rollout(self, window: TimeSeriesWindow, controls: Sequence[float]) -> list[float]:
        temps = []
        for u in controls:
            prediction = self.predictor(window, u)
            if not math.isfinite(prediction):
                raise ControllerError(f"The model predicted {prediction} for u = {u} W")
            temps.append(prediction)
            window = advance_window(window, prediction, u)
        return temps


def choose_control(
        model: Model,
        window: TimeSeriesWindow,
        config: MpcConfig,
        u_max: float | None = None,
    ) -> ControlDecision:
    """ Enumerates every candidate control sequence over the horizon and keeps the cheapest.

        Ties go to the lower total energy, then to the lower first control.
        A sequence whose rollout leaves the simulator bounds is infeasible and
        skipped. A model that predicts a non-finite temperature, or a grid with
        no feasible sequence, makes the controller fall back to `u = 0`.

        Raises
        ------
        ContractViolation
            The window carries no timestamps.

        Returns
        -------
        :class:`ControlDecision`
            The decision for the current step.
    """
    if window.timestamps is None:
        raise ContractViolation("The controller needs window timestamps to price comfort")
    step = pd.Timedelta(minutes=window.sampling_minutes)
    times = [window.timestamps[-1] + step * (k + 1) for k in range(config.horizon)]
    best_key, best = None, None
    try:
        for controls in itertools.product(config.candidates, repeat=config.horizon):
            try:
                temps = model.rollout(window, controls)
            except NumericError as error:
                logger.debug("Skipping infeasible sequence %s: %s", controls, error)
                continue
            terms = evaluate_objective(temps, controls, times, config, window.sampling_minutes, u_max)
            key = (terms.total, sum(controls), controls[0])
            if best_key is None or key < best_key:
                best_key = key
                best = ControlDecision(float(controls[0]), tuple(temps), terms)
    except ControllerError as error:
        logger.warning("Falling back to u = 0: %s", error)
        return ControlDecision(0.0, fallback=True)
    if best is None:
        logger.warning("Falling back to u = 0: no candidate sequence stays within the simulator bounds")
        return ControlDecision(0.0, fallback=True)
    return best


#
# Controllers
#

class Controller:
    """ Decides the power held over each sampling interval of a closed loop. """

    def decide(self, window: TimeSeriesWindow, state: RoomState, exo: ExogenousSample) -> ControlDecision:
        raise NotImplementedError

    def substep(self, state: RoomState, u: float) -> float:
        """ Power applied during one simulator substep; the decision by default. """
        return u

    def observe(self, window: TimeSeriesWindow, u: float, truth: float) -> None:
        """ Receives the realised temperature after each interval. """


class ModelController(Controller):
    """ MPC over a single base model. """

    def __init__(self, model: BaseModel, config: MpcConfig, u_max: float | None = None) -> None:
        self.model = WindowModel(lambda window, u: model_predict(model, window, u))
        self.config = config
        self.u_max = u_max

    def decide(self, window, state, exo) -> ControlDecision:
        return choose_control(self.model, window, self.config, self.u_max)


class EnsembleController(Controller):
    """ MPC over the ensemble the policy composes at every step.

        The tracker is updated with each model's error against the realised
        temperature, exactly as on logged data.
    """

    def __init__(
            self,
            policy: EnsemblePolicy,
            library: ModelLibrary,
            config: MpcConfig,
            u_max: float | None = None,
        ) -> None:
        self.policy = policy
        self.library = library
        self.config = config
        self.u_max = u_max
        self.tracker = ErrorTracker(len(library))

    def decide(self, window, state, exo) -> ControlDecision:
        _, w = self.policy.act(window, self.tracker.errors.copy())
        selected = np.flatnonzero(w)

        def predict(window: TimeSeriesWindow, u: float) -> float:
            return float(sum(w[i] * model_predict(self.library[i], window, u) for i in selected))

        return choose_control(WindowModel(predict), window, self.config, self.u_max)

    def observe(self, window, u, truth) -> None:
        self.tracker.update((self.library.predict(window, u) - truth) ** 2)


@dataclass
class OracleModel:
    """ The true room physics, started from the true state, disturbances held constant.

        Powers above the rated power are clipped as on the plant.
    """

    params: RoomParams
    state: RoomState
    exo: ExogenousSample
    substeps: int

    def rollout(self, window: TimeSeriesWindow, controls: Sequence[float]) -> list[float]:
        state, temps = self.state, []
        for u in controls:
            for _ in range(self.substeps):
                state = step_room(state, min(u, self.params.rated_power), self.exo, self.params, SUBSTEP)
            temps.append(state.t_room)
        return temps


class OracleController(Controller):
    """ MPC with a perfect model of the room. """

    def __init__(self, params: RoomParams, config: MpcConfig, sampling_minutes: int, u_max: float | None = None) -> None:
        self.params = params
        self.config = config
        self.substeps = int(sampling_minutes * 60 // SUBSTEP)
        self.u_max = u_max

    def decide(self, window, state, exo) -> ControlDecision:
        return choose_control(OracleModel(self.params, state, exo, self.substeps), window, self.config, self.u_max)


class ThermostatController(Controller):
    """ Always-on bang-bang heating at the comfort setpoint, switched every substep. """

    def __init__(self, params: RoomParams, config: MpcConfig) -> None:
        self.power = params.rated_power
        self.low = config.setpoint - config.thermostat_hysteresis
        self.high = config.setpoint + config.thermostat_hysteresis
        self.running = False

    def decide(self, window, state, exo) -> ControlDecision:
        return ControlDecision(self.power if self.running else 0.0)

    def substep(self, state, u) -> float:
        if state.t_room < self.low:
            self.running = True
        elif state.t_room > self.high:
            self.running = False
        return self.power if self.running else 0.0


@dataclass
class ClosedLoopResult:
    log: pd.DataFrame
    config: MpcConfig = field(repr=False)

    @property
    def energy_kwh(self) -> float:
        return float(self.log["energy_kwh_cum"].iloc[-1]) if len(self.log) else 0.0

    @property
    def compliance(self) -> float:
        return comfort_compliance(self.log, self.config)


def comfort_compliance(log: pd.DataFrame, config: MpcConfig) -> float:
    """ Fraction of comfort-window steps with the room inside the band. """
    stamps = pd.to_datetime(log["timestamp"])
    inside = np.array([config.in_comfort_window(stamp) for stamp in stamps], dtype=bool)
    if not inside.any():
        return 1.0
    deviation = np.abs(log["t_room"].to_numpy()[inside] - config.setpoint)
    return float((deviation <= config.band).mean())


def closed_loop_simulate(
        params: RoomParams,
        initial_state: RoomState,
        controller: Controller,
        config: MpcConfig,
        start: datetime,
        days: int,
        sampling_minutes: int = 15,
        exogenous: ExogenousConfig | None = None,
        seed: int = 0,
        lookback: int = 8,
    ) -> ClosedLoopResult:
    """ Drives the simulated room with `controller` for `days` days.

        The room first floats freely for `lookback` steps so the first window
        is complete. At every step the controller decides from the window, the
        simulator advances the true room with the disturbances held over the
        interval, and the controller observes the realised temperature. The
        plant never draws more than its rated power, whatever the decision.
        The logged terms price the realised temperature and the applied power.

        Returns
        -------
        :class:`ClosedLoopResult`
            One log row per controlled step.
    """
    step = pd.Timedelta(minutes=sampling_minutes)
    substeps = int(sampling_minutes * 60 // SUBSTEP)
    steps = days * 24 * 60 // sampling_minutes
    exogenous = (exogenous or ExogenousConfig()).model_copy(
        update={"start": pd.Timestamp(start) - step * lookback, "step_minutes": sampling_minutes}
    )
    exo = synthesize_exogenous(exogenous, lookback + steps + 1, seed, params.orientation)
    disturbances = np.column_stack([getattr(exo, name) for name in DISTURBANCE_COLUMNS])
    u_max = config.u_max if config.u_max is not None else params.rated_power

    state = initial_state
    t_room, u_applied = [], []
    for k in range(lookback):
        t_room.append(state.t_room)
        u_applied.append(0.0)
        for _ in range(substeps):
            state = step_room(state, 0.0, exo.sample(k), params, SUBSTEP)

    rows, energy = [], 0.0
    for k in range(lookback, lookback + steps):
        t_room.append(state.t_room)
        window = TimeSeriesWindow(
            x=np.array(t_room[k - lookback + 1 : k + 1]),
            u=np.array(u_applied[k - lookback + 1 : k]),
            d=disturbances[k - lookback + 1 : k + 1],
            sampling_minutes=sampling_minutes,
            timestamps=exo.timestamps[k - lookback + 1 : k + 1],
        )
        sample = exo.sample(k)
        decision = controller.decide(window, state, sample)
        powers = []
        for _ in range(substeps):
            u = min(controller.substep(state, decision.u), params.rated_power)
            powers.append(u)
            state = step_room(state, u, sample, params, SUBSTEP)
        u_mean = float(np.mean(powers))
        u_applied.append(u_mean)
        controller.observe(window, u_mean, state.t_room)

        terms = evaluate_objective([state.t_room], [u_mean], [exo.timestamps[k + 1]], config, sampling_minutes, u_max)
        energy += u_mean * sampling_minutes / 60.0 / 1000.0
        rows.append({
            "timestamp": exo.timestamps[k].isoformat(),
            "t_room": t_room[k],
            "u_chosen": u_mean,
            "j_comfort": terms.j_comfort,
            "j_consume": terms.j_consume,
            "p_e": terms.p_e,
            "energy_kwh_cum": energy,
        })
    return ClosedLoopResult(pd.DataFrame(rows, columns=list(LOG_COLUMNS)), config)
