#
# conftest.py
#

from datetime import datetime

import numpy as np
import pandas as pd
import pytest

from thermo_ensemble.base_models import BaseModel, ModelLibrary
from thermo_ensemble.encoder import EncoderConfig
from thermo_ensemble.features import FeatureSpec, TimeSeriesWindow, lag
from thermo_ensemble.simulator import (
    DATASET_COLUMNS, RoomDataset, RoomParams, ThermostatConfig, generate_room_dataset,
)

START = datetime(2023, 11, 6)


def _dataset(
        t_room,
        u_hvac=None,
        t_amb=None,
        occupancy=None,
        solar=None,
        room_id: str = "room_00",
        sampling_minutes: int = 15,
        start: datetime = START,
    ) -> RoomDataset:
    t_room = np.asarray(t_room, dtype=float)
    n = len(t_room)
    timestamps = pd.date_range(start, periods=n, freq=f"{sampling_minutes}min")
    frame = pd.DataFrame({
        "timestamp": timestamps,
        "t_room": t_room,
        "u_hvac": np.zeros(n) if u_hvac is None else np.asarray(u_hvac, dtype=float),
        "t_amb": np.full(n, 10.0) if t_amb is None else np.asarray(t_amb, dtype=float),
        "occupancy": np.zeros(n) if occupancy is None else np.asarray(occupancy, dtype=float),
        "solar": np.zeros(n) if solar is None else np.asarray(solar, dtype=float),
        "day_type": (timestamps.dayofweek >= 5).astype(int),
    }, columns=list(DATASET_COLUMNS))
    return RoomDataset(room_id, sampling_minutes, frame)


@pytest.fixture
def make_dataset():
    """ Builds a dataset from raw columns; missing disturbances are constant. """
    return _dataset


@pytest.fixture
def linear_room():
    """ A stream following a known affine recursion in x, u and t_amb. """
    rng = np.random.default_rng(7)
    n = 600
    u = rng.choice([0.0, 500.0, 1000.0, 2000.0], size=n)
    t_amb = 8.0 + 4.0 * np.sin(np.arange(n) * 2 * np.pi / 96) + rng.normal(0.0, 0.5, n)
    x = np.empty(n)
    x[0] = 18.0
    for t in range(n - 1):
        x[t + 1] = 0.9 * x[t] + 0.08 * t_amb[t] + 0.0004 * u[t] + 1.2
    return _dataset(x, u, t_amb)


@pytest.fixture
def room_params():
    return RoomParams(
        c_room=2.4e6,
        c_wall=1.2e7,
        r_room_wall=1 / 300.0,
        r_room_ambient=1 / 90.0,
        hvac_efficiency=3.0,
        solar_gain_peak=600.0,
        occupant_gain=100.0,
        rated_power=2000.0,
        floor_area=60.0,
    )


@pytest.fixture
def simulated_room(room_params):
    return generate_room_dataset(room_params, ThermostatConfig(), START, 3, 15, seed=11)


@pytest.fixture
def window():
    """ A constant window: x = 20, u = 0, every disturbance 10. """
    return TimeSeriesWindow(
        x=np.full(8, 20.0),
        u=np.zeros(7),
        d=np.full((8, 3), 10.0),
        timestamps=pd.date_range(START, periods=8, freq="15min"),
    )


@pytest.fixture
def constant_library():
    """ Two intercept-only models predicting 20 and 22, each with a tiny control term. """
    spec = FeatureSpec(8, (lag("u", 0),))
    return ModelLibrary((
        BaseModel(spec, np.zeros(1), 20.0, "mlr", "a"),
        BaseModel(spec, np.zeros(1), 22.0, "mlr", "b"),
    ))


@pytest.fixture
def tiny_encoder_config():
    return EncoderConfig(hidden=8, lookback=8)
