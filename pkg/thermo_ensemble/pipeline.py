#
# pipeline.py
#

import json
import logging
import platform
import time
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from .agents import HierarchicalAgent, SingleTierAgent
from .base_models import BaseModel, ModelLibrary, build_library, fit_room
from .baselines import (
    FixedWeights, HeuristicTopN, best_single_oracle, equal_weight_all, static_search_weights,
)
from .config import ExperimentConfig
from .ensemble import RECORD_COLUMNS, reference_records, run_evaluation
from .errors import ConfigError, MissingArtifactError
from .metrics import MetricsReport
from .mpc import (
    Controller, EnsembleController, ModelController, OracleController, ThermostatController,
    closed_loop_simulate, comfort_compliance,
)
from .simulator import RoomDataset, RoomState, generate_room_dataset, sample_room_params
from .training import train_single_tier, train_two_stage

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "fit", "train", "evaluate", "mpc-run", "report")
REFERENCES = ("customized_mlr", "customized_dict")


@dataclass(frozen=True)
class ArtifactLayout:
    """ Where every command reads and writes under the output directory. """

    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def library(self) -> Path:
        return self.root / "models" / "library.json"

    @property
    def customized(self) -> Path:
        return self.root / "models" / "customized.json"

    @property
    def agents(self) -> Path:
        return self.root / "agents"

    @property
    def training_log(self) -> Path:
        return self.agents / "training_log.csv"

    @property
    def single_tier_log(self) -> Path:
        return self.agents / "single_tier_log.csv"

    @property
    def records(self) -> Path:
        return self.root / "eval" / "records"

    @property
    def metrics(self) -> Path:
        return self.root / "eval" / "metrics.json"

    @property
    def run_metadata(self) -> Path:
        return self.root / "eval" / "run_metadata.json"

    @property
    def mpc(self) -> Path:
        return self.root / "mpc"

    @property
    def summary_csv(self) -> Path:
        return self.root / "report" / "summary.csv"

    @property
    def summary_txt(self) -> Path:
        return self.root / "report" / "summary.txt"

    def room_csv(self, room_id: str) -> Path:
        return self.data / f"{room_id}.csv"

    def records_csv(self, method: str) -> Path:
        return self.records / f"{method}.csv"

    def mpc_csv(self, source: str, room_id: str) -> Path:
        return self.mpc / f"{source}_{room_id}.csv"


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(str(path), producer)
    return path


def room_ids(config: ExperimentConfig) -> tuple[list[str], list[str]]:
    """ Training and test room ids; the first rooms train. """
    ids = [f"room_{i:02d}" for i in range(config.experiment.n_rooms)]
    n_train = config.experiment.n_train
    return ids[:n_train], ids[n_train:]


def _load_rooms(layout: ArtifactLayout, ids: list[str]) -> list[RoomDataset]:
    return [RoomDataset.load(_require(layout.room_csv(room_id), "simulate")) for room_id in ids]


#
# Commands
#

def simulate(config: ExperimentConfig, layout: ArtifactLayout) -> list[RoomDataset]:
    """ Draws every room, simulates it under thermostat excitation and writes its CSV and sidecar. """
    sim = config.simulation
    train_ids, test_ids = room_ids(config)
    children = np.random.SeedSequence(config.experiment.seed).spawn(len(train_ids) + len(test_ids))
    datasets = []
    for room_id, child in zip(train_ids + test_ids, children):
        params_seed, data_seed = (int(value) for value in child.generate_state(2))
        params = sample_room_params(params_seed)
        dataset = generate_room_dataset(
            params, sim.thermostat, sim.start, sim.days, sim.sampling_minutes, data_seed,
            exogenous=sim.exogenous, room_id=room_id,
        )
        dataset.save(layout.data)
        datasets.append(dataset)
        logger.debug("Simulated %s (%.0f m2, %d rows)", room_id, params.floor_area, len(dataset))
    logger.info("Simulated %d rooms into %s", len(datasets), layout.data)
    return datasets


def fit(config: ExperimentConfig, layout: ArtifactLayout) -> ModelLibrary:
    """ Fits the library on the training rooms and the customized references on each test room's first part. """
    section = config.base_models
    train_ids, test_ids = room_ids(config)
    library = build_library(
        _load_rooms(layout, train_ids), section.methods, section.lookback, section.max_terms, section.ridge
    ).truncated(section.library_size)
    library.save(layout.library)

    customized = {}
    for dataset in _load_rooms(layout, test_ids):
        first, _ = dataset.split(config.experiment.test_split)
        customized[dataset.room_id] = {
            method: fit_room(first, method, section.lookback, section.max_terms, section.ridge).to_dict()
            for method in ("mlr", "dict")
        }
    layout.customized.write_text(json.dumps(customized, indent=1))
    logger.info("Saved %d base models and customized models for %d test rooms", len(library), len(customized))
    return library


def _load_library(layout: ArtifactLayout) -> ModelLibrary:
    return ModelLibrary.load(_require(layout.library, "fit"))


def _training_config(config: ExperimentConfig):
    return config.training.model_copy(update={"seed": config.experiment.seed})


def train(config: ExperimentConfig, layout: ArtifactLayout) -> HierarchicalAgent:
    """ Trains the hierarchical agent, and the single-tier ablation when it is evaluated. """
    library = _load_library(layout)
    train_ids, _ = room_ids(config)
    datasets = _load_rooms(layout, train_ids)
    training = _training_config(config)

    result = train_two_stage(datasets, library, training)
    result.agent.save(layout.agents)
    result.log.to_csv(layout.training_log, index=False)
    if "single_tier_rl" in config.baselines.strategies:
        single = train_single_tier(datasets, library, training)
        single.agent.save(layout.agents)
        single.log.to_csv(layout.single_tier_log, index=False)
    logger.info("Saved trained agents to %s", layout.agents)
    return result.agent


def _load_customized(layout: ArtifactLayout) -> dict[str, dict[str, BaseModel]]:
    documents = json.loads(_require(layout.customized, "fit").read_text())
    return {
        room: {method: BaseModel.from_dict(document) for method, document in models.items()}
        for room, models in documents.items()
    }


def _policy_factories(config: ExperimentConfig, layout: ArtifactLayout, library: ModelLibrary, validation: dict):
    training = config.training
    _require(layout.agents / "high.json", "train")
    agent = HierarchicalAgent.load(layout.agents, training.c_min, training.c_max)

    def hierarchical(dataset: RoomDataset):
        agent.guarded_steps = 0
        return agent

    factories = {"hierarchical": hierarchical}
    baselines = config.baselines
    n_models = len(library)
    for strategy in baselines.strategies:
        match strategy:
            case "heuristic_top_n":
                factories[strategy] = lambda dataset: HeuristicTopN(n_models, baselines.top_n)
            case "equal_weight_all":
                factories[strategy] = lambda dataset: equal_weight_all(n_models)
            case "static_search":
                factories[strategy] = lambda dataset: FixedWeights(static_search_weights(
                    validation[dataset.room_id], library, baselines.search_budget, baselines.seed
                ))
            case "single_tier_rl":
                _require(layout.agents / "single_tier.json", "train")
                single = SingleTierAgent.load(layout.agents, training.c_min, training.c_max)
                factories[strategy] = lambda dataset: single
            case "best_single_oracle":
                factories[strategy] = lambda dataset: best_single_oracle(dataset, library)
    return factories


def evaluate(config: ExperimentConfig, layout: ArtifactLayout) -> MetricsReport:
    """ Scores every method on the second part of each test room and writes records and metrics. """
    started = time.perf_counter()
    library = _load_library(layout)
    customized = _load_customized(layout)
    _, test_ids = room_ids(config)
    validation, streams = {}, []
    for dataset in _load_rooms(layout, test_ids):
        first, second = dataset.split(config.experiment.test_split)
        validation[dataset.room_id] = first
        streams.append(second)

    training = config.training
    counts = library.variable_counts(training.count_mode)
    records = run_evaluation(
        streams, _policy_factories(config, layout, library, validation), library, counts,
        training.alpha, training.beta,
    )
    for reference, method in zip(REFERENCES, ("mlr", "dict")):
        records[reference] = pd.concat(
            [reference_records(stream, customized[stream.room_id][method], library.lookback) for stream in streams],
            ignore_index=True,
        )

    layout.records.mkdir(parents=True, exist_ok=True)
    for method, frame in records.items():
        frame.to_csv(layout.records_csv(method), index=False)
    report = MetricsReport.from_records(records, REFERENCES)
    report.save(layout.metrics)
    layout.run_metadata.write_text(json.dumps({
        "seed": config.experiment.seed,
        "rooms": test_ids,
        "methods": list(records),
        "seconds": time.perf_counter() - started,
        "python": platform.python_version(),
        "versions": {name: _version(name) for name in ("thermo-ensemble", "numpy", "scipy", "pandas", "pydantic")},
    }, indent=2))
    logger.info("Wrote records of %d methods and %s", len(records), layout.metrics)
    return report


def _version(package: str) -> str:
    try:
        return metadata.version(package)
    except metadata.PackageNotFoundError:
        return "unknown"


def _controller(
        source: str,
        config: ExperimentConfig,
        layout: ArtifactLayout,
        library: ModelLibrary,
        dataset: RoomDataset,
    ) -> Controller:
    mpc = config.mpc
    params = dataset.params
    match source:
        case "base":
            if mpc.base_model >= len(library):
                raise ConfigError(f"The library holds {len(library)} models", keys=("mpc.base_model",))
            return ModelController(library[mpc.base_model], mpc, params.rated_power)
        case "ensemble":
            _require(layout.agents / "high.json", "train")
            agent = HierarchicalAgent.load(layout.agents, config.training.c_min, config.training.c_max)
            return EnsembleController(agent, library, mpc, params.rated_power)
        case "oracle":
            return OracleController(params, mpc, dataset.sampling_minutes, params.rated_power)
        case "thermostat":
            return ThermostatController(params, mpc)


def mpc_run(config: ExperimentConfig, layout: ArtifactLayout) -> dict[str, pd.DataFrame]:
    """ Runs the closed loop of every configured source on the first test rooms.

        Each run continues where the room's log ends, from its last logged
        temperature, with fresh disturbances.
    """
    library = _load_library(layout)
    _, test_ids = room_ids(config)
    mpc = config.mpc
    layout.mpc.mkdir(parents=True, exist_ok=True)
    logs = {}
    for dataset in _load_rooms(layout, test_ids[: mpc.rooms]):
        last = float(dataset.frame["t_room"].iat[-1])
        start = dataset.frame["timestamp"].iat[-1] + pd.Timedelta(minutes=dataset.sampling_minutes)
        for source in mpc.sources:
            controller = _controller(source, config, layout, library, dataset)
            result = closed_loop_simulate(
                dataset.params, RoomState(last, last), controller, mpc, start, mpc.days,
                dataset.sampling_minutes, config.simulation.exogenous, dataset.seed or 0, library.lookback,
            )
            path = layout.mpc_csv(source, dataset.room_id)
            result.log.to_csv(path, index=False)
            logs[path.stem] = result.log
            logger.info(
                "%s on %s: compliance %.1f%%, energy %.1f kWh",
                source, dataset.room_id, 100 * result.compliance, result.energy_kwh,
            )
    return logs


def _read_records(path: Path) -> pd.DataFrame:
    return pd.read_csv(
        path, float_precision="round_trip", dtype={"room": str, "b_bitstring": str, "weights_json": str}
    )


def mpc_summary(config: ExperimentConfig, layout: ArtifactLayout) -> pd.DataFrame:
    """ Comfort compliance and energy of every closed-loop log on disk. """
    rows = []
    for path in sorted(layout.mpc.glob("*.csv")):
        source, room = path.stem.split("_", 1)
        log = pd.read_csv(path, float_precision="round_trip")
        rows.append({
            "source": source,
            "room": room,
            "compliance": comfort_compliance(log, config.mpc),
            "energy_kwh": float(log["energy_kwh_cum"].iloc[-1]) if len(log) else 0.0,
        })
    return pd.DataFrame(rows, columns=["source", "room", "compliance", "energy_kwh"])


def report(config: ExperimentConfig, layout: ArtifactLayout) -> str:
    """ Recomputes every number from the record logs and writes the summary tables. """
    paths = sorted(_require(layout.records, "evaluate").glob("*.csv"))
    if not paths:
        raise MissingArtifactError(str(layout.records_csv("<method>")), "evaluate")
    records = {path.stem: _read_records(path) for path in paths}
    for frame in records.values():
        if tuple(frame.columns) != RECORD_COLUMNS:
            raise ConfigError(f"Unexpected record columns {tuple(frame.columns)}")
    metrics = MetricsReport.from_records(records, [name for name in REFERENCES if name in records])

    layout.summary_csv.parent.mkdir(parents=True, exist_ok=True)
    metrics.summary().to_csv(layout.summary_csv, index=False)
    text = metrics.format()
    if layout.mpc.exists():
        closed_loop = mpc_summary(config, layout)
        if len(closed_loop):
            text += "\n\nClosed loop\n" + closed_loop.to_string(index=False, float_format=lambda value: f"{value:.3f}")
    layout.summary_txt.write_text(text + "\n")
    return text


def run_command(config: ExperimentConfig, command: str) -> int:
    """ Runs one pipeline command against the configured output directory.

        Raises
        ------
        ConfigError
            The command is unknown or the configuration is unusable.
        MissingArtifactError
            A prerequisite artifact is missing.

        Returns
        -------
        :class:`int`
            The exit status, `0`.
    """
    layout = ArtifactLayout(config.output_dir)
    for directory in (layout.data, layout.library.parent, layout.agents):
        directory.mkdir(parents=True, exist_ok=True)
    match command:
        case "simulate":
            simulate(config, layout)
        case "fit":
            fit(config, layout)
        case "train":
            train(config, layout)
        case "evaluate":
            evaluate(config, layout)
        case "mpc-run":
            mpc_run(config, layout)
        case "report":
            print(report(config, layout))
        case _:
            raise ConfigError(f"Unknown command '{command}'; expected one of {', '.join(COMMANDS)}")
    return 0
