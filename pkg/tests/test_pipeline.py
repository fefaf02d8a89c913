#
# test_pipeline.py
#

import json

import pandas as pd
import pytest

from thermo_ensemble.agents import HierarchicalAgent, SingleTierAgent
from thermo_ensemble.base_models import ModelLibrary
from thermo_ensemble.config import ExperimentConfig, parse_config
from thermo_ensemble.ensemble import RECORD_COLUMNS
from thermo_ensemble.errors import ConfigError, MissingArtifactError
from thermo_ensemble.metrics import MetricsReport, check_ordering
from thermo_ensemble.mpc import LOG_COLUMNS
from thermo_ensemble.pipeline import COMMANDS, ArtifactLayout, room_ids, run_command
from thermo_ensemble.simulator import RoomDataset

METHODS = (
    "hierarchical", "heuristic_top_n", "equal_weight_all", "static_search", "single_tier_rl",
    "best_single_oracle", "customized_mlr", "customized_dict",
)

def _small_config(output_dir, seed=0):
    return parse_config({
        "experiment": {"seed": seed, "output_dir": str(output_dir), "n_rooms": 3},
        "simulation": {"days": 6},
        "training": {
            "hidden": 8, "batch_size": 32, "steps_per_epoch": 64, "stage1_epochs": 1, "stage2_epochs": 1,
        },
        "baselines": {"search_budget": 50},
        "mpc": {"days": 1},
    })

def _run_all(config):
    for command in COMMANDS:
        assert run_command(config, command) == 0
    return ArtifactLayout(config.output_dir)

@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    config = _small_config(tmp_path_factory.mktemp("run"))
    return config, _run_all(config)

def test_room_ids():
    config = _small_config("unused")
    assert room_ids(config) == (["room_00", "room_01"], ["room_02"])

@pytest.mark.timeout(900)
def test_artifacts_reload(pipeline_run):
    config, layout = pipeline_run
    for room_id in ("room_00", "room_01", "room_02"):
        dataset = RoomDataset.load(layout.room_csv(room_id))
        assert len(dataset) == 6 * 96
        assert dataset.params is not None
    library = ModelLibrary.load(layout.library)
    assert len(library) == 4
    assert set(json.loads(layout.customized.read_text())) == {"room_02"}
    assert HierarchicalAgent.load(layout.agents).n_models == 4
    assert SingleTierAgent.load(layout.agents).n_models == 4
    assert len(pd.read_csv(layout.training_log)) == 2
    assert len(pd.read_csv(layout.single_tier_log)) == 2
    metadata = json.loads(layout.run_metadata.read_text())
    assert metadata["seed"] == 0
    assert metadata["rooms"] == ["room_02"]

@pytest.mark.timeout(900)
def test_records_and_metrics(pipeline_run):
    config, layout = pipeline_run
    report = MetricsReport.load(layout.metrics)
    assert set(report.methods) == set(METHODS)
    assert set(report.improvements["hierarchical"]) == {"customized_mlr", "customized_dict"}
    steps = 6 * 96 // 2 - 8
    for method in METHODS:
        frame = pd.read_csv(layout.records_csv(method), dtype={"b_bitstring": str})
        assert tuple(frame.columns) == RECORD_COLUMNS
        assert len(frame) == steps
        assert report.methods[method]["steps"] == steps

@pytest.mark.timeout(900)
def test_report_replays_records(pipeline_run):
    config, layout = pipeline_run
    assert run_command(config, "report") == 0
    summary = pd.read_csv(layout.summary_csv)
    report = MetricsReport.load(layout.metrics)
    for row in summary.itertuples():
        assert row.mae == pytest.approx(report.methods[row.method]["mae"], rel=1e-12)
    written = layout.summary_txt.read_text()
    assert "Imp.%" in written
    assert "Closed loop" in written

@pytest.mark.timeout(900)
def test_closed_loop_logs(pipeline_run):
    config, layout = pipeline_run
    for source in ("base", "ensemble", "oracle", "thermostat"):
        log = pd.read_csv(layout.mpc_csv(source, "room_02"))
        assert tuple(log.columns) == LOG_COLUMNS
        assert len(log) == 96

@pytest.mark.timeout(1800)
def test_same_seed_same_metrics(pipeline_run, tmp_path):
    config, layout = pipeline_run
    again = _small_config(tmp_path / "again")
    for command in ("simulate", "fit", "train", "evaluate"):
        run_command(again, command)
    assert (tmp_path / "again" / "eval" / "metrics.json").read_text() == layout.metrics.read_text()

def test_missing_prerequisites(tmp_path):
    config = _small_config(tmp_path)
    with pytest.raises(MissingArtifactError) as info:
        run_command(config, "fit")
    assert info.value.producer == "simulate"
    with pytest.raises(MissingArtifactError) as info:
        run_command(config, "evaluate")
    assert info.value.producer == "fit"
    with pytest.raises(MissingArtifactError):
        run_command(config, "report")

@pytest.mark.timeout(600)
def test_evaluate_without_train(tmp_path):
    config = _small_config(tmp_path)
    run_command(config, "simulate")
    run_command(config, "fit")
    with pytest.raises(MissingArtifactError) as info:
        run_command(config, "evaluate")
    assert info.value.producer == "train"
    assert "high.json" in info.value.path

def test_unknown_command(tmp_path):
    with pytest.raises(ConfigError):
        run_command(_small_config(tmp_path), "plot")

@pytest.mark.slow
@pytest.mark.timeout(3 * 3600)
def test_seed_averaged_ordering(tmp_path):
    reports = []
    for seed in range(3):
        config = ExperimentConfig.default().with_overrides(seed=seed, output_dir=tmp_path / f"seed_{seed}")
        for command in ("simulate", "fit", "train", "evaluate"):
            assert run_command(config, command) == 0
        reports.append(MetricsReport.load(ArtifactLayout(config.output_dir).metrics))
    ordering = check_ordering(reports)
    assert ordering.margin >= 0.10
    assert ordering.beats_ablation
