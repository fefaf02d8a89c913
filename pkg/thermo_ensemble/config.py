#
# config.py
#

import logging
import math
import tomllib
from datetime import datetime
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .baselines import BaselineConfig
from .base_models import DEFAULT_RIDGE
from .errors import ConfigError
from .features import DEFAULT_LOOKBACK
from .mpc import MpcConfig
from .simulator import ExogenousConfig, ThermostatConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)


class ExperimentSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = 0
    output_dir: Path = Path("runs/default")
    n_rooms: int = Field(25, ge=2)
    train_fraction: float = Field(0.8, gt=0, lt=1)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    test_split: float = Field(0.5, gt=0, lt=1)

    @model_validator(mode="after")
    def _check_fractions(self) -> "ExperimentSection":
        if not math.isclose(self.train_fraction + self.test_fraction, 1.0, abs_tol=1e-9):
            raise ValueError("train_fraction and test_fraction must sum to 1")
        return self

    @property
    def n_train(self) -> int:
        """ :class:`int`: Rooms used for base models and training; at least one room is left for testing. """
        return min(max(1, round(self.n_rooms * self.train_fraction)), self.n_rooms - 1)


class SimulationSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    start: datetime = datetime(2023, 11, 2)
    days: int = Field(90, ge=1)
    sampling_minutes: Literal[15, 60] = 15
    exogenous: ExogenousConfig = ExogenousConfig()
    thermostat: ThermostatConfig = ThermostatConfig()


class BaseModelSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    methods: list[Literal["mlr", "dict"]] = ["mlr", "dict"]
    lookback: int = Field(DEFAULT_LOOKBACK, ge=4)
    max_terms: int = Field(8, ge=1)
    ridge: float = Field(DEFAULT_RIDGE, ge=0)
    library_size: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_methods(self) -> "BaseModelSection":
        if not self.methods or len(set(self.methods)) != len(self.methods):
            raise ValueError("methods must be a non-empty list without repeats")
        return self


class ExperimentConfig(BaseModel):
    """ Every setting of one experiment, one section per module. """

    model_config = ConfigDict(frozen=True, extra="forbid")

    experiment: ExperimentSection = ExperimentSection()
    simulation: SimulationSection = SimulationSection()
    base_models: BaseModelSection = BaseModelSection()
    training: TrainConfig = TrainConfig()
    baselines: BaselineConfig = BaselineConfig()
    mpc: MpcConfig = MpcConfig()

    @classmethod
    def default(cls) -> "ExperimentConfig":
        """ The desk-scale experiment: 20 training rooms, 5 test rooms, 40 base models. """
        return cls()

    def with_overrides(self, seed: int | None = None, output_dir: str | Path | None = None) -> "ExperimentConfig":
        """ Applies the command-line overrides of `experiment.seed` and `experiment.output_dir`. """
        update = {}
        if seed is not None:
            update["seed"] = seed
        if output_dir is not None:
            update["output_dir"] = Path(output_dir)
        if not update:
            return self
        return self.model_copy(update={"experiment": self.experiment.model_copy(update=update)})

    @property
    def output_dir(self) -> Path:
        return self.experiment.output_dir


def _dotted(location: tuple) -> str:
    return ".".join(str(part) for part in location)


def parse_config(document: dict) -> ExperimentConfig:
    """ Validates a configuration document.

        Raises
        ------
        ConfigError
            Some key is unknown or has an invalid value; every offending
            dotted key is listed.
    """
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as error:
        keys = sorted({_dotted(detail["loc"]) or "<root>" for detail in error.errors()})
        raise ConfigError("Invalid configuration", keys) from error


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    """ Reads a TOML configuration; the default experiment when `path` is `None`.

        Raises
        ------
        ConfigError
            The file is missing, is not valid TOML or fails validation.
    """
    if path is None:
        return ExperimentConfig.default()
    path = Path(path)
    try:
        document = tomllib.loads(path.read_text())
    except FileNotFoundError as error:
        raise ConfigError(f"Configuration file '{path}' does not exist") from error
    except tomllib.TOMLDecodeError as error:
        raise ConfigError(f"Configuration file '{path}' is not valid TOML ({error})") from error
    config = parse_config(document)
    logger.debug("Loaded configuration from %s", path)
    return config
