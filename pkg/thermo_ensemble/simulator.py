#
# simulator.py
#

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime
from enum import StrEnum
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ContractViolation, SimulationBlowUp
from .validate import validate_choice, validate_nonnegative, validate_positive

logger = logging.getLogger(__name__)

DATASET_COLUMNS = ("timestamp", "t_room", "u_hvac", "t_amb", "occupancy", "solar", "day_type")
DISTURBANCE_COLUMNS = ("t_amb", "occupancy", "solar")

# Plausibility bound of simulated temperatures (degC)
TEMPERATURE_BOUND = (-20.0, 50.0)
# Longest explicit-Euler substep (s)
MAX_SUBSTEP = 120.0
SUBSTEP = 60.0
# Irradiance at which a room receives its peak solar gain (W/m2)
SOLAR_REFERENCE = 1000.0

_ORIENTATION_SCALE = {"N": 0.3, "E": 0.8, "S": 1.0, "W": 0.8}
_ORIENTATION_SHIFT = {"N": 0.0, "E": -2.0, "S": 0.0, "W": 2.0}


class Orientation(StrEnum):
    N = "N"
    E = "E"
    S = "S"
    W = "W"


class Mode(StrEnum):
    HEATING = "heating"
    COOLING = "cooling"


@dataclass(frozen=True)
class RoomParams:
    """ Parameters of the two-node (room air + wall) thermal circuit.

        Parameters
        ----------
        c_room: :class:`float`
            Heat capacity of the room node (J/K).
        c_wall: :class:`float`
            Heat capacity of the wall node (J/K).
        r_room_wall: :class:`float`
            Resistance between room and wall (K/W).
        r_room_ambient: :class:`float`
            Resistance between room and outdoor air (K/W).
        hvac_efficiency: :class:`float`
            Thermal watts delivered per electrical watt, in (0, 5].
        solar_gain_peak: :class:`float`
            Solar gain (W) at the reference irradiance.
        occupant_gain: :class:`float`
            Internal gain per occupant (W).
        orientation: :class:`Orientation`
            Facade orientation.
        mode: :class:`Mode`
            Heating or cooling; fixed for a dataset.
        rated_power: :class:`float`
            Electrical capacity of the HVAC unit (W).
        floor_area: :class:`float`
            Floor area the other parameters were scaled from (m2).

        Raises
        ------
        ContractViolation
            A capacitance, resistance or power is not positive,
            or the efficiency lies outside (0, 5].
    """

    c_room: float
    c_wall: float
    r_room_wall: float
    r_room_ambient: float
    hvac_efficiency: float
    solar_gain_peak: float = 0.0
    occupant_gain: float = 0.0
    orientation: Orientation = Orientation.S
    mode: Mode = Mode.HEATING
    rated_power: float = 3000.0
    floor_area: float = 60.0

    def __post_init__(self) -> None:
        for name in ("c_room", "c_wall", "r_room_wall", "r_room_ambient", "rated_power", "floor_area"):
            validate_positive(name, getattr(self, name))
        validate_positive("hvac_efficiency", self.hvac_efficiency)
        if self.hvac_efficiency > 5:
            raise ContractViolation(
                f"Expected `hvac_efficiency` in (0, 5], instead found {self.hvac_efficiency}"
            )
        validate_nonnegative("solar_gain_peak", self.solar_gain_peak)
        validate_nonnegative("occupant_gain", self.occupant_gain)
        validate_choice("orientation", self.orientation, tuple(Orientation))
        validate_choice("mode", self.mode, tuple(Mode))
        object.__setattr__(self, "orientation", Orientation(self.orientation))
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def sign(self) -> float:
        """ :class:`float`: `+1` when heating, `-1` when cooling. """
        return 1.0 if self.mode is Mode.HEATING else -1.0

    @property
    def stability_bound(self) -> float:
        """ :class:`float`: Largest explicit-Euler step (s) keeping the update monotone. """
        r_parallel = 1.0 / (1.0 / self.r_room_wall + 1.0 / self.r_room_ambient)
        return min(self.c_room * r_parallel, self.c_wall * self.r_room_wall)

    def to_dict(self) -> dict:
        document = asdict(self)
        document["orientation"] = str(self.orientation)
        document["mode"] = str(self.mode)
        return document

    @classmethod
    def from_dict(cls, document: dict) -> "RoomParams":
        return cls(**document)


@dataclass(frozen=True)
class RoomState:
    """ Temperatures (degC) of the room and wall nodes. """

    t_room: float
    t_wall: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.t_room) and math.isfinite(self.t_wall)):
            raise SimulationBlowUp(f"Non-finite room state {self}", node="RoomState")

    def within_bound(self) -> bool:
        low, high = TEMPERATURE_BOUND
        return low <= self.t_room <= high and low <= self.t_wall <= high


@dataclass(frozen=True)
class ExogenousSample:
    """ One sample of the disturbances acting on a room. """

    t_amb: float
    occupancy: float = 0.0
    solar: float = 0.0


@dataclass(frozen=True)
class ExogenousSeries:
    """ Uniformly sampled disturbance series.

        Parameters
        ----------
        timestamps: :class:`pandas.DatetimeIndex`
            Sample times with a constant interval.
        t_amb: :class:`numpy.ndarray`
            Ambient temperature (degC).
        occupancy: :class:`numpy.ndarray`
            Headcount, non-negative.
        solar: :class:`numpy.ndarray`
            Irradiance on the facade (W/m2), non-negative.
        day_type: :class:`numpy.ndarray`
            `1` on weekends, `0` on workdays.

        Raises
        ------
        ContractViolation
            The series have different lengths or the sampling is not uniform.
    """

    timestamps: pd.DatetimeIndex
    t_amb: np.ndarray
    occupancy: np.ndarray
    solar: np.ndarray
    day_type: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.timestamps)
        if any(len(getattr(self, name)) != n for name in ("t_amb", "occupancy", "solar", "day_type")):
            raise ContractViolation("Exogenous series must all have the same length.")
        if n > 1 and len(set(np.diff(self.timestamps.asi8))) != 1:
            raise ContractViolation("Exogenous series must be uniformly sampled.")

    def __len__(self) -> int:
        return len(self.timestamps)

    def sample(self, index: int) -> ExogenousSample:
        return ExogenousSample(
            float(self.t_amb[index]), float(self.occupancy[index]), float(self.solar[index])
        )


class ExogenousConfig(BaseModel):
    """ Seasonal and schedule parameters of the synthetic disturbances. """

    model_config = ConfigDict(frozen=True, extra="forbid")

    start: datetime = datetime(2023, 11, 2)
    step_minutes: int = Field(15, gt=0)
    ambient_mean: float = 8.0
    ambient_amplitude: float = Field(5.0, ge=0)
    ambient_peak_hour: float = Field(15.0, ge=0, lt=24)
    ambient_trend: float = -0.02
    noise_std: float = Field(0.3, ge=0)
    schedule: list[tuple[float, float]] = [(9.0, 12.0), (13.0, 18.0)]
    max_occupants: int = Field(12, ge=0)
    presence_probability: float = Field(0.6, ge=0, le=1)
    solar_peak: float = Field(600.0, ge=0)
    sunrise: float = Field(7.0, ge=0, lt=24)
    sunset: float = Field(17.0, gt=0, le=24)
    cloud_min: float = Field(0.3, ge=0, le=1)

    @model_validator(mode="after")
    def _check_windows(self) -> "ExogenousConfig":
        if self.sunset <= self.sunrise:
            raise ValueError("sunset must come after sunrise")
        for start, end in self.schedule:
            if not 0 <= start < end <= 24:
                raise ValueError(f"invalid schedule window ({start}, {end})")
        return self


class ThermostatConfig(BaseModel):
    """ Bang-bang thermostat that excites the rooms while data is logged. """

    model_config = ConfigDict(frozen=True, extra="forbid")

    occupied_setpoint: float = 21.0
    setback_setpoint: float = 17.0
    occupied_start: float = Field(8.0, ge=0, lt=24)
    occupied_end: float = Field(20.0, gt=0, le=24)
    preheat_hours: float = Field(2.0, ge=0)
    deadband_min: float = Field(0.2, gt=0)
    deadband_max: float = Field(0.5, gt=0)
    level_min: float = Field(0.5, gt=0, le=1)
    level_max: float = Field(0.9, gt=0, le=1)
    boost_margin: float = Field(0.5, ge=0)
    off_probability: float = Field(0.05, ge=0, le=1)
    off_min_hours: float = Field(1.0, ge=0)
    off_max_hours: float = Field(3.0, ge=0)
    control_minutes: int = Field(3, gt=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "ThermostatConfig":
        if self.deadband_max < self.deadband_min:
            raise ValueError("deadband_max must be at least deadband_min")
        if self.level_max < self.level_min:
            raise ValueError("level_max must be at least level_min")
        if self.off_max_hours < self.off_min_hours:
            raise ValueError("off_max_hours must be at least off_min_hours")
        return self

    def setpoint(self, timestamp: pd.Timestamp) -> float:
        """ Returns the scheduled setpoint, pre-heating ahead of occupied hours on workdays. """
        hour = timestamp.hour + timestamp.minute / 60.0
        if timestamp.dayofweek < 5 and self.occupied_start - self.preheat_hours <= hour < self.occupied_end:
            return self.occupied_setpoint
        return self.setback_setpoint


@dataclass(frozen=True)
class RoomDataset:
    """ Logged data stream of one room.

        Parameters
        ----------
        room_id: :class:`str`
            Identifier of the room, also the file stem on disk.
        sampling_minutes: :class:`int`
            Interval between rows.
        frame: :class:`pandas.DataFrame`
            Rows with the columns of `DATASET_COLUMNS`.
        params: :class:`RoomParams` | `None`
            Parameters of the simulated room, when known.
        seed: :class:`int` | `None`
            Seed the data was generated with, when known.

        Raises
        ------
        ContractViolation
            The column schema differs, timestamps are not strictly increasing
            at the sampling interval, or some HVAC power is negative.
    """

    room_id: str
    sampling_minutes: int
    frame: pd.DataFrame
    params: RoomParams | None = None
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if tuple(self.frame.columns) != DATASET_COLUMNS:
            raise ContractViolation(
                f"Expected columns {DATASET_COLUMNS}, instead found {tuple(self.frame.columns)}"
            )
        steps = np.diff(self.frame["timestamp"].to_numpy().astype("datetime64[ns]").astype(np.int64))
        if len(steps) and not np.all(steps == self.sampling_minutes * 60 * 10**9):
            raise ContractViolation("Dataset timestamps must be gap-free at the sampling interval.")
        if (self.frame["u_hvac"] < 0).any():
            raise ContractViolation("HVAC power must be non-negative.")

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def period(self) -> tuple[str, str]:
        """ tuple[:class:`str`, :class:`str`]: First and last timestamp in ISO-8601. """
        stamps = self.frame["timestamp"]
        return stamps.iloc[0].isoformat(), stamps.iloc[-1].isoformat()

    def split(self, fraction: float) -> tuple["RoomDataset", "RoomDataset"]:
        """ Splits the stream in time; the first part holds `fraction` of the rows. """
        cut = int(round(len(self) * fraction))
        head = self.frame.iloc[:cut].reset_index(drop=True)
        tail = self.frame.iloc[cut:].reset_index(drop=True)
        return (
            RoomDataset(self.room_id, self.sampling_minutes, head, self.params, self.seed, dict(self.metadata)),
            RoomDataset(self.room_id, self.sampling_minutes, tail, self.params, self.seed, dict(self.metadata)),
        )

    def save(self, directory: str | Path) -> Path:
        """ Writes `<room_id>.csv` and its `<room_id>.json` metadata sidecar. """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / f"{self.room_id}.csv"
        self.frame.to_csv(csv_path, index=False, date_format="%Y-%m-%dT%H:%M:%S")
        sidecar = {
            "room_id": self.room_id,
            "sampling_minutes": self.sampling_minutes,
            "seed": self.seed,
            "params": self.params.to_dict() if self.params else None,
            **self.metadata,
        }
        (directory / f"{self.room_id}.json").write_text(json.dumps(sidecar, indent=2))
        return csv_path

    @classmethod
    def load(cls, csv_path: str | Path) -> "RoomDataset":
        """ Reads a dataset written by :meth:`save`. """
        csv_path = Path(csv_path)
        frame = pd.read_csv(csv_path, parse_dates=["timestamp"], float_precision="round_trip")
        sidecar = json.loads(csv_path.with_suffix(".json").read_text())
        params = sidecar.pop("params", None)
        return cls(
            room_id=sidecar.pop("room_id"),
            sampling_minutes=sidecar.pop("sampling_minutes"),
            frame=frame,
            params=RoomParams.from_dict(params) if params else None,
            seed=sidecar.pop("seed", None),
            metadata=sidecar,
        )


def step_room(
        state: RoomState,
        u: float,
        exo: ExogenousSample,
        params: RoomParams,
        dt: float,
    ) -> RoomState:
    """ Advances the room by one explicit-Euler substep.

        C_room dT_room/dt = (T_wall - T_room)/R_rw + (T_amb - T_room)/R_ra
                            + s * eta * u + q_occ + q_solar
        C_wall dT_wall/dt = (T_room - T_wall)/R_rw

        Parameters
        ----------
        state: :class:`RoomState`
            Temperatures at the start of the substep.
        u: :class:`float`
            Electrical HVAC power (W), non-negative.
        exo: :class:`ExogenousSample`
            Disturbances held over the substep.
        params: :class:`RoomParams`
            The room.
        dt: :class:`float`
            Substep length (s), at most `MAX_SUBSTEP`.

        Raises
        ------
        ContractViolation
            `dt` or `u` is out of range.
        SimulationBlowUp
            The new state leaves the plausibility bound.

        Returns
        -------
        :class:`RoomState`
            Temperatures at the end of the substep.
    """
    if not 0 < dt <= MAX_SUBSTEP:
        raise ContractViolation(f"Expected 0 < dt <= {MAX_SUBSTEP} s, instead found {dt}")
    if u < 0:
        raise ContractViolation(f"Expected non-negative HVAC power, instead found {u}")

    q_internal = params.occupant_gain * exo.occupancy + params.solar_gain_peak * exo.solar / SOLAR_REFERENCE
    wall_flow = (state.t_wall - state.t_room) / params.r_room_wall
    ambient_flow = (exo.t_amb - state.t_room) / params.r_room_ambient
    hvac = params.sign * params.hvac_efficiency * u
    t_room = state.t_room + dt * (wall_flow + ambient_flow + hvac + q_internal) / params.c_room
    t_wall = state.t_wall - dt * wall_flow / params.c_wall

    low, high = TEMPERATURE_BOUND
    if not (low <= t_room <= high and low <= t_wall <= high):
        raise SimulationBlowUp(
            f"Room state ({t_room:.3g}, {t_wall:.3g}) left [{low}, {high}] degC "
            f"with dt={dt} and params={params}"
        )
    return RoomState(t_room, t_wall)


def synthesize_exogenous(
        config: ExogenousConfig,
        horizon: int,
        seed: int,
        orientation: Orientation | str = Orientation.S,
    ) -> ExogenousSeries:
    """ Generates ambient temperature, occupancy and solar series.

        Ambient temperature is a daily sinusoid plus a linear trend and
        Gaussian noise. Occupancy is a binomial headcount inside the schedule
        windows on workdays and zero elsewhere. Solar irradiance is a
        half-sine between sunrise and sunset, shifted and scaled by the facade
        orientation and damped by a daily cloud factor.

        Parameters
        ----------
        config: :class:`ExogenousConfig`
            Seasonal and schedule parameters.
        horizon: :class:`int`
            Number of samples, positive.
        seed: :class:`int`
            Seed of the noise, headcounts and cloud factors.
        orientation: :class:`Orientation` | :class:`str`
            Facade orientation for the solar series.

        Raises
        ------
        ContractViolation
            `horizon` is not positive.

        Returns
        -------
        :class:`ExogenousSeries`
            The generated disturbances.
    """
    if horizon <= 0:
        raise ContractViolation(f"Expected a positive horizon, instead found {horizon}")
    orientation = Orientation(orientation)
    rng = np.random.default_rng(seed)

    timestamps = pd.date_range(config.start, periods=horizon, freq=f"{config.step_minutes}min")
    hours = timestamps.hour.to_numpy() + timestamps.minute.to_numpy() / 60.0
    days = ((timestamps - timestamps[0]) / pd.Timedelta(days=1)).to_numpy()
    weekend = (timestamps.dayofweek.to_numpy() >= 5).astype(float)

    t_amb = (
        config.ambient_mean
        + config.ambient_amplitude * np.cos(2.0 * np.pi * (hours - config.ambient_peak_hour) / 24.0)
        + config.ambient_trend * days
        + rng.normal(0.0, config.noise_std, horizon)
    )

    scheduled = np.zeros(horizon, dtype=bool)
    for start, end in config.schedule:
        scheduled |= (hours >= start) & (hours < end)
    scheduled &= weekend == 0
    occupancy = rng.binomial(config.max_occupants, config.presence_probability, horizon) * scheduled

    day_index = np.floor(days).astype(int)
    clouds = rng.uniform(config.cloud_min, 1.0, day_index.max() + 1)[day_index]
    phase = (hours - _ORIENTATION_SHIFT[orientation] - config.sunrise) / (config.sunset - config.sunrise)
    solar = np.clip(np.sin(np.pi * phase), 0.0, None) * ((phase >= 0) & (phase <= 1))
    solar = solar * config.solar_peak * _ORIENTATION_SCALE[orientation] * clouds

    return ExogenousSeries(timestamps, t_amb, occupancy.astype(float), solar, weekend)


def sample_room_params(seed: int, mode: Mode = Mode.HEATING) -> RoomParams:
    """ Draws a heterogeneous room; every extensive quantity scales with floor area.

        Areas range over 27-179 m2, so C_room spans roughly [1e6, 8e6] J/K.
    """
    rng = np.random.default_rng(seed)
    area = rng.uniform(27.0, 179.0)
    c_room = area * rng.uniform(37e3, 44e3)
    return RoomParams(
        c_room=c_room,
        c_wall=c_room * rng.uniform(3.0, 8.0),
        r_room_wall=1.0 / (area * rng.uniform(3.0, 8.0)),
        r_room_ambient=1.0 / (area * rng.uniform(0.8, 1.6)),
        hvac_efficiency=rng.uniform(2.5, 3.5),
        solar_gain_peak=area * rng.uniform(5.0, 20.0),
        occupant_gain=rng.uniform(80.0, 120.0),
        orientation=Orientation(rng.choice(list(Orientation))),
        mode=mode,
        rated_power=area * rng.uniform(20.0, 35.0),
        floor_area=area,
    )


def generate_room_dataset(
        params: RoomParams,
        excitation: ThermostatConfig,
        start: datetime,
        days: int,
        sampling_minutes: int,
        seed: int,
        exogenous: ExogenousConfig | None = None,
        room_id: str = "room_00",
        initial_state: RoomState | None = None,
    ) -> RoomDataset:
    """ Simulates a room under thermostat excitation and logs it.

        The thermostat decides every `control_minutes` with hysteresis around
        the scheduled setpoint; its deadband is redrawn daily, its on-level per
        on-cycle, and with a small daily probability the unit is switched off
        for a few hours, possibly past midnight. Rows hold the state at the
        start of each sampling interval, the mean electrical power over the
        interval and the disturbances at its start.

        Parameters
        ----------
        params: :class:`RoomParams`
            The room to simulate.
        excitation: :class:`ThermostatConfig`
            The thermostat driving the HVAC unit.
        start: :class:`datetime.datetime`
            First timestamp.
        days: :class:`int`
            Length of the period in days.
        sampling_minutes: :class:`int`
            Either `15` or `60`.
        seed: :class:`int`
            Seed of the disturbances and the thermostat randomisation.
        exogenous: :class:`ExogenousConfig` | `None`
            Disturbance parameters; defaults apply when omitted.
        room_id: :class:`str`
            Identifier stored with the dataset.
        initial_state: :class:`RoomState` | `None`
            Initial temperatures; both nodes start at the setback setpoint otherwise.

        Raises
        ------
        ContractViolation
            The sampling is unsupported or not a multiple of the control interval.
        SimulationBlowUp
            Propagated from :func:`step_room`.

        Returns
        -------
        :class:`RoomDataset`
            `days * 24 * 60 / sampling_minutes` rows.
    """
    validate_choice("sampling_minutes", sampling_minutes, (15, 60))
    control = excitation.control_minutes
    if sampling_minutes % control or (control * 60) % SUBSTEP:
        raise ContractViolation(
            f"The control interval ({control} min) must divide the sampling interval "
            f"({sampling_minutes} min) and be a multiple of the {SUBSTEP:.0f} s substep"
        )
    exo_seed, thermostat_seed = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(thermostat_seed)

    per_sample = sampling_minutes // control
    substeps = int(control * 60 // SUBSTEP)
    n_rows = days * 24 * 60 // sampling_minutes
    exogenous = (exogenous or ExogenousConfig()).model_copy(update={"start": start, "step_minutes": control})
    exo = synthesize_exogenous(
        exogenous, n_rows * per_sample, int(exo_seed.generate_state(1)[0]), params.orientation
    )

    if initial_state is None:
        initial_state = RoomState(excitation.setback_setpoint, excitation.setback_setpoint)
    state = initial_state
    t_room = np.empty(n_rows)
    u_mean = np.zeros(n_rows)

    heating = params.mode is Mode.HEATING
    running = False
    level = excitation.level_max
    deadband = excitation.deadband_max
    off_periods: list[tuple[pd.Timestamp, pd.Timestamp]] = []
    current_day = None
    for k, timestamp in enumerate(exo.timestamps):
        row, offset = divmod(k, per_sample)
        if offset == 0:
            t_room[row] = state.t_room

        if timestamp.date() != current_day:
            current_day = timestamp.date()
            deadband = rng.uniform(excitation.deadband_min, excitation.deadband_max)
            off_periods = [period for period in off_periods if period[1] > timestamp]
            if rng.random() < excitation.off_probability:
                begin = pd.Timestamp(current_day) + pd.Timedelta(hours=rng.uniform(0.0, 24.0))
                hours = rng.uniform(excitation.off_min_hours, excitation.off_max_hours)
                off_periods.append((begin, begin + pd.Timedelta(hours=hours)))

        setpoint = excitation.setpoint(timestamp)
        error = (setpoint - state.t_room) if heating else (state.t_room - setpoint)
        if error > deadband and not running:
            running = True
            level = rng.uniform(excitation.level_min, excitation.level_max)
        elif error < -deadband:
            running = False

        u = 0.0
        if running and not any(begin <= timestamp < end for begin, end in off_periods):
            boost = error > deadband + excitation.boost_margin
            u = params.rated_power * (1.0 if boost else level)

        sample = exo.sample(k)
        for _ in range(substeps):
            state = step_room(state, u, sample, params, SUBSTEP)
        u_mean[row] += u / per_sample

    rows = slice(None, None, per_sample)
    frame = pd.DataFrame({
        "timestamp": exo.timestamps[rows],
        "t_room": t_room,
        "u_hvac": u_mean,
        "t_amb": exo.t_amb[rows],
        "occupancy": exo.occupancy[rows],
        "solar": exo.solar[rows],
        "day_type": exo.day_type[rows].astype(int),
    })
    logger.debug("Simulated %s: %d rows, mean power %.0f W", room_id, n_rows, u_mean.mean())
    return RoomDataset(room_id, sampling_minutes, frame, params, seed)
