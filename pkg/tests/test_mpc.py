#
# test_mpc.py
#

from datetime import datetime, timedelta

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from thermo_ensemble.baselines import FixedWeights
from thermo_ensemble.base_models import BaseModel, ModelLibrary, fit_room
from thermo_ensemble.errors import ContractViolation, SimulationBlowUp
from thermo_ensemble.features import TimeSeriesWindow
from thermo_ensemble.mpc import (
    LOG_COLUMNS, ControlDecision, Controller, EnsembleController, ModelController, MpcConfig,
    OracleController, OracleModel, ThermostatController, WindowModel, advance_window, choose_control,
    closed_loop_simulate, comfort_compliance, evaluate_objective,
)
from thermo_ensemble.simulator import (
    ExogenousConfig, ExogenousSample, RoomParams, RoomState, ThermostatConfig, generate_room_dataset,
)
from thermo_ensemble.training import TrainConfig, train_two_stage

START = datetime(2023, 11, 6)

NOON = pd.Timestamp("2023-11-06 12:00")

QUIET = ExogenousConfig(max_occupants=0, solar_peak=0.0, noise_std=0.0)

class LinearModel:
    """ One-step predictions `offset + gain * u`, whatever the window. """

    def __init__(self, offset, gain):
        self.offset = offset
        self.gain = gain

    def rollout(self, window, controls):
        return [self.offset + self.gain * u for u in controls]

class HotModel(LinearModel):
    """ Leaves the simulator bounds whenever a control reaches `limit`. """

    def __init__(self, limit):
        super().__init__(15.0, 0.002)
        self.limit = limit

    def rollout(self, window, controls):
        if max(controls) >= self.limit:
            raise SimulationBlowUp(f"Rollout of {controls} left the bounds")
        return super().rollout(window, controls)

class HeatBelowSetpoint(Controller):
    """ Asks for far more than any unit delivers whenever the room is below 20. """

    def decide(self, window, state, exo):
        return ControlDecision(10000.0 if state.t_room < 20.0 else 0.0)

def _window(hour="10:00", x=20.0):
    return TimeSeriesWindow(
        x=np.full(8, x),
        u=np.zeros(7),
        d=np.full((8, 3), 10.0),
        timestamps=pd.date_range(f"2023-11-06 {hour}", periods=8, freq="15min"),
    )

def test_objective_inside_band():
    terms = evaluate_objective([20.5], [0.0], [NOON], MpcConfig())
    assert terms.total == 0.0

def test_objective_terms():
    config = MpcConfig(comfort_weight=1.0, energy_weight=0.0)
    assert evaluate_objective([23.0], [0.0], [NOON], config).j_comfort == pytest.approx(1.0)
    assert evaluate_objective([23.0], [0.0], [pd.Timestamp("2023-11-06 23:00")], config).j_comfort == 0.0
    terms = evaluate_objective([20.0], [1000.0], [NOON], MpcConfig(energy_weight=2.0))
    assert terms.j_consume == pytest.approx(2.0 * 0.25)
    assert evaluate_objective([20.0], [3000.0], [NOON], MpcConfig(u_max=2000.0)).p_e > 0.0
    assert evaluate_objective([35.0], [0.0], [NOON], MpcConfig()).p_e == pytest.approx(5000.0)
    with pytest.raises(ContractViolation):
        evaluate_objective([20.0, 21.0], [0.0], [NOON], MpcConfig())

def test_preheat_prices_comfort():
    config = MpcConfig(preheat_hours=2.0)
    assert config.weighs_comfort(pd.Timestamp("2023-11-06 08:30"))
    assert not config.in_comfort_window(pd.Timestamp("2023-11-06 08:30"))
    assert not config.weighs_comfort(pd.Timestamp("2023-11-06 20:00"))

def test_config_validation():
    with pytest.raises(ValidationError):
        MpcConfig(candidates=[500.0, 1000.0])
    with pytest.raises(ValidationError):
        MpcConfig(band=0.0)
    with pytest.raises(ValidationError):
        MpcConfig(t_min=25.0, t_max=20.0)

def test_nearest_setpoint_without_energy_cost():
    config = MpcConfig(band=0.25, energy_weight=0.0)
    model = LinearModel(15.0, 0.002)
    decision = choose_control(model, _window(), config)
    assert decision.u == 2500.0
    assert decision.trajectory == (20.0,)
    # Brute force over the candidate set
    costs = [evaluate_objective(model.rollout(None, [u]), [u], [NOON], config).total for u in config.candidates]
    assert decision.j == min(costs)

def test_comfortable_room_stays_off():
    decision = choose_control(LinearModel(20.0, 0.001), _window(), MpcConfig(comfort_weight=0.0))
    assert decision.u == 0.0
    assert decision.j == 0.0

def test_ties_go_to_lower_energy():
    config = MpcConfig(band=0.1, energy_weight=0.0, candidates=[2000.0, 0.0])
    # 18 and 22 are equally far from 20
    assert choose_control(LinearModel(18.0, 0.002), _window(), config).u == 0.0

def test_breakdown_sums_to_objective():
    decision = choose_control(LinearModel(16.0, 0.001), _window(), MpcConfig())
    terms = decision.terms
    assert decision.j == pytest.approx(terms.j_comfort + terms.j_consume + terms.p_e, abs=1e-9)
    assert min(terms.j_comfort, terms.j_consume, terms.p_e) >= 0.0

def test_non_finite_prediction_falls_back():
    decision = choose_control(WindowModel(lambda window, u: float("nan")), _window(), MpcConfig())
    assert decision.u == 0.0
    assert decision.fallback

def test_infeasible_sequences_are_skipped():
    config = MpcConfig(band=0.25, energy_weight=0.0)
    decision = choose_control(HotModel(3000.0), _window(), config)
    assert decision.u == 2500.0
    assert not decision.fallback
    decision = choose_control(HotModel(0.0), _window(), config)
    assert decision.u == 0.0
    assert decision.fallback

@pytest.mark.timeout(300)
def test_oracle_in_a_small_room():
    params = RoomParams(
        c_room=1e6, c_wall=3e6, r_room_wall=1 / 81.0, r_room_ambient=1 / 21.6, hvac_efficiency=3.5,
        rated_power=4000.0, floor_area=27.0,
    )
    state = RoomState(20.0, 20.0)
    with pytest.raises(SimulationBlowUp):
        OracleModel(params, state, ExogenousSample(10.0), 15).rollout(None, (4000.0, 4000.0, 4000.0))
    config = MpcConfig(horizon=3)
    decision = OracleController(params, config, 15).decide(_window(), state, ExogenousSample(10.0))
    assert not decision.fallback
    assert decision.u in config.candidates
    assert len(decision.trajectory) == 3
    assert max(decision.trajectory) <= 50.0

def test_needs_timestamps():
    window = TimeSeriesWindow(x=np.full(8, 20.0), u=np.zeros(7), d=np.zeros((8, 3)))
    with pytest.raises(ContractViolation):
        choose_control(LinearModel(20.0, 0.0), window, MpcConfig())

def test_longer_horizon_matches_brute_force():
    config = MpcConfig(horizon=2, candidates=[0.0, 1000.0, 2000.0])
    model = WindowModel(lambda window, u: 0.5 * window.x[-1] + 9.0 + 0.002 * u)
    window = _window(x=16.0)
    decision = choose_control(model, window, config)
    times = [window.timestamps[-1] + pd.Timedelta(minutes=15) * k for k in (1, 2)]
    best = min(
        (evaluate_objective(model.rollout(window, (a, b)), (a, b), times, config).total, a + b, a)
        for a in config.candidates for b in config.candidates
    )
    assert decision.j == pytest.approx(best[0])
    assert decision.u == best[2]
    assert len(decision.trajectory) == 2

def test_advance_window(window):
    shifted = advance_window(window, 21.5, 300.0)
    assert shifted.x[-1] == 21.5
    assert shifted.u[-1] == 300.0
    assert len(shifted.x) == 8
    np.testing.assert_array_equal(shifted.d[-1], window.d[-1])
    assert shifted.timestamps[-1] == window.timestamps[-1] + pd.Timedelta(minutes=15)

def test_thermostat_substeps(room_params):
    thermostat = ThermostatController(room_params, MpcConfig())
    assert thermostat.substep(RoomState(19.0, 19.0), 0.0) == room_params.rated_power
    assert thermostat.substep(RoomState(20.2, 20.0), 0.0) == room_params.rated_power
    assert thermostat.substep(RoomState(20.6, 20.0), 0.0) == 0.0

@pytest.mark.timeout(300)
def test_oracle_keeps_the_band(room_params):
    config = MpcConfig(days=2)
    oracle = closed_loop_simulate(
        room_params, RoomState(16.0, 16.0), OracleController(room_params, config, 15), config, START, 2,
        exogenous=QUIET, seed=1,
    )
    assert tuple(oracle.log.columns) == LOG_COLUMNS
    assert len(oracle.log) == 2 * 96
    assert oracle.compliance >= 0.95
    assert np.all(np.diff(oracle.log["energy_kwh_cum"]) >= 0.0)
    thermostat = closed_loop_simulate(
        room_params, RoomState(16.0, 16.0), ThermostatController(room_params, config), config, START, 2,
        exogenous=QUIET, seed=1,
    )
    assert thermostat.compliance >= 0.95
    assert oracle.energy_kwh <= thermostat.energy_kwh

@pytest.mark.timeout(300)
def test_closed_loop_is_deterministic(room_params):
    config = MpcConfig(days=1)
    runs = [
        closed_loop_simulate(
            room_params, RoomState(18.0, 18.0), OracleController(room_params, config, 15), config, START, 1, seed=4,
        ).log
        for _ in range(2)
    ]
    pd.testing.assert_frame_equal(runs[0], runs[1])

@pytest.mark.timeout(300)
def test_model_and_ensemble_controllers(room_params, simulated_room, constant_library):
    config = MpcConfig(days=1)
    model = fit_room(simulated_room, "mlr", 8)
    result = closed_loop_simulate(
        room_params, RoomState(18.0, 18.0), ModelController(model, config), config, START, 1, seed=2,
    )
    assert len(result.log) == 96
    assert np.all(np.isfinite(result.log["t_room"]))
    assert set(result.log["u_chosen"]) <= set(config.candidates)

    controller = EnsembleController(FixedWeights(np.array([0.5, 0.5])), constant_library, config)
    result = closed_loop_simulate(room_params, RoomState(18.0, 18.0), controller, config, START, 1, seed=2)
    # The constant models see no benefit in heating
    assert np.all(result.log["u_chosen"] == 0.0)
    assert not np.array_equal(controller.tracker.errors, np.ones(2))
    assert np.all(controller.tracker.errors >= 0.0)

def test_compliance_without_comfort_steps():
    log = pd.DataFrame({"timestamp": ["2023-11-06T02:00:00"], "t_room": [5.0]})
    assert comfort_compliance(log, MpcConfig()) == 1.0

def test_plant_draws_at_most_rated_power(room_params):
    config = MpcConfig(days=1)
    result = closed_loop_simulate(
        room_params, RoomState(16.0, 16.0), HeatBelowSetpoint(), config, START, 1, exogenous=QUIET, seed=3,
    )
    assert result.log["u_chosen"].max() == room_params.rated_power
    assert (result.log["p_e"] == 0.0).all()

@pytest.mark.timeout(900)
def test_ensemble_mpc_against_a_miscalibrated_model(room_params):
    config = MpcConfig(band=1.5, days=4)
    outcomes = []
    for seed in range(3):
        history = generate_room_dataset(room_params, ThermostatConfig(), START - timedelta(days=4), 4, 15, seed=seed)
        accurate = fit_room(history, "mlr", 8)
        # Believes the room is 3 degC colder than it is
        planted = BaseModel(accurate.spec, accurate.coefficients, accurate.intercept - 3.0, "mlr", "planted")
        library = ModelLibrary((accurate, planted))
        training = TrainConfig(
            blend=1.0, lr_stage1=0.01, lr_stage2=0.01, hidden=8, batch_size=32, steps_per_epoch=128,
            stage1_epochs=5, stage2_epochs=20, seed=seed,
        )
        agent = train_two_stage([history], library, training).agent
        ensemble, base = [
            closed_loop_simulate(
                room_params, RoomState(16.0, 16.0), controller, config, START, 4, exogenous=QUIET, seed=seed,
            )
            for controller in (EnsembleController(agent, library, config), ModelController(planted, config))
        ]
        compliance = comfort_compliance(ensemble.log, MpcConfig())
        outcomes.append(
            compliance >= 0.95
            and compliance >= comfort_compliance(base.log, MpcConfig())
            and ensemble.energy_kwh <= base.energy_kwh
        )
    assert sum(outcomes) >= 2
