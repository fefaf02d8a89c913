#
# test_base_models.py
#

import numpy as np
import pandas as pd
import pytest

from thermo_ensemble.base_models import (
    BaseModel, ModelLibrary, bic, build_library, fit_dictionary_regression, fit_least_squares,
    fit_room, forward_selection, model_predict, variable_count,
)
from thermo_ensemble.errors import ContractViolation, FittingError
from thermo_ensemble.features import (
    FeatureSpec, TimeSeriesWindow, design_matrix, lag, product, square, window_at,
)

def _planted(make_dataset, rows: int = 600):
    """ x[t+1] = 10 + 0.5 t_amb[t] + 0.002 u[t] + N(0, 0.01^2). """
    rng = np.random.default_rng(21)
    u = rng.choice([0.0, 500.0, 1000.0, 2000.0], size=rows)
    t_amb = 8.0 + rng.normal(0.0, 3.0, rows)
    x = np.empty(rows)
    x[0] = 15.0
    x[1:] = 10.0 + 0.5 * t_amb[:-1] + 0.002 * u[:-1] + rng.normal(0.0, 0.01, rows - 1)
    return make_dataset(x, u, t_amb)

def _rss_with_intercept(matrix: np.ndarray, targets: np.ndarray) -> float:
    full = np.column_stack([np.ones(len(targets)), matrix])
    solution = np.linalg.pinv(full) @ targets
    residual = targets - full @ solution
    return float(residual @ residual)

def test_recovers_known_coefficients(linear_room):
    spec = FeatureSpec(8, (lag("x", 0), lag("t_amb", 0), lag("u", 0)))
    model = fit_least_squares(linear_room, spec, ridge=0.0)
    np.testing.assert_allclose(model.coefficients, [0.9, 0.08, 0.0004], atol=1e-6)
    assert model.intercept == pytest.approx(1.2, abs=1e-6)
    assert model.method == "mlr"
    assert model.source_room == "room_00"
    assert model.training_period == linear_room.period

def test_intercept_only_is_mean(make_dataset):
    model = fit_least_squares(make_dataset(np.full(50, 21.5)), FeatureSpec(8, ()))
    assert model.intercept == pytest.approx(21.5)
    assert model.coefficients.shape == (0,)

def test_duplicate_column(simulated_room):
    spec = FeatureSpec(8, (square("x", 0), product(("x", 0), ("x", 0)), lag("u", 0)))
    model = fit_least_squares(simulated_room, spec)
    assert np.all(np.isfinite(model.coefficients))
    matrix, targets, _ = design_matrix(simulated_room.frame, spec)
    residual = targets - model.intercept - matrix @ model.coefficients
    assert float(residual @ residual) == pytest.approx(_rss_with_intercept(matrix, targets), rel=1e-8, abs=1e-8)

def test_insufficient_rows(make_dataset):
    with pytest.raises(FittingError):
        fit_least_squares(make_dataset(np.full(50, 20.0)), FeatureSpec.default_mlr())
    with pytest.raises(FittingError):
        fit_dictionary_regression(make_dataset(np.full(150, 20.0)), FeatureSpec.default_dictionary())
    with pytest.raises(ContractViolation):
        fit_least_squares(make_dataset(np.full(200, 20.0)), FeatureSpec.default_mlr(), ridge=-1.0)

def test_planted_terms_recovered(make_dataset):
    dataset = _planted(make_dataset)
    model = fit_dictionary_regression(dataset, FeatureSpec.default_dictionary(), max_terms=8)
    assert {"t_amb[t]", "u[t]"} <= set(model.spec.names)
    matrix, targets, _ = design_matrix(dataset.frame, model.spec)
    residual = targets - model.intercept - matrix @ model.coefficients
    assert np.mean(residual ** 2) < 1e-3
    assert model.method == "dict"

def test_single_term_is_best_single_term(make_dataset):
    dataset = _planted(make_dataset)
    spec = FeatureSpec.default_dictionary()
    model = fit_dictionary_regression(dataset, spec, max_terms=1)
    matrix, targets, _ = design_matrix(dataset.frame, spec)
    scores = [_rss_with_intercept(matrix[:, [j]], targets) for j in range(len(spec))]
    assert model.spec.names == [spec.names[int(np.argmin(scores))]]

def test_pure_noise_selects_at_most_one_term(make_dataset):
    rng = np.random.default_rng(8)
    n = 2000
    dataset = make_dataset(
        20.0 + rng.normal(0.0, 0.1, n),
        u_hvac=rng.choice([0.0, 1000.0], size=n),
        t_amb=8.0 + rng.normal(0.0, 2.0, n),
    )
    model = fit_dictionary_regression(dataset, FeatureSpec.default_dictionary(), max_terms=8)
    assert len(model.spec) <= 1

def test_require_control(make_dataset):
    rng = np.random.default_rng(9)
    n = 600
    dataset = make_dataset(
        20.0 + rng.normal(0.0, 0.1, n),
        u_hvac=rng.choice([0.0, 1000.0], size=n),
        t_amb=8.0 + rng.normal(0.0, 2.0, n),
    )
    model = fit_dictionary_regression(dataset, FeatureSpec.default_dictionary(), require_control=True)
    assert model.spec.controllable
    with pytest.raises(ContractViolation):
        fit_dictionary_regression(dataset, FeatureSpec.default_dictionary(), max_terms=0)

def test_forward_selection_order():
    rng = np.random.default_rng(10)
    matrix = rng.normal(size=(3000, 4))
    targets = 3.0 * matrix[:, 2] + 0.5 * matrix[:, 0] + rng.normal(0.0, 0.01, 3000)
    assert forward_selection(matrix, targets, max_terms=4) == [2, 0]
    assert forward_selection(matrix, targets, max_terms=1) == [2]

def test_bic():
    assert bic(1.0, 100, 0) == pytest.approx(100 * np.log(0.01) + np.log(100))
    assert np.isfinite(bic(0.0, 100, 3))
    assert bic(1.0, 100, 2) > bic(1.0, 100, 1)

def test_model_predict_constant(window):
    model = BaseModel(FeatureSpec.default_mlr(), np.zeros(9), 21.0)
    assert model_predict(model, window, 0.0) == 21.0
    assert model_predict(model, window, 3000.0) == 21.0
    with pytest.raises(ContractViolation):
        BaseModel(FeatureSpec.default_mlr(), np.zeros(3), 21.0)

def test_model_predict_incompatible_window():
    model = BaseModel(FeatureSpec.default_mlr(), np.ones(9), 0.0)
    short = TimeSeriesWindow(x=np.full(2, 20.0), u=np.zeros(1), d=np.zeros((2, 3)))
    with pytest.raises(ContractViolation):
        model_predict(model, short, 0.0)

def test_variable_count_cases():
    spec = FeatureSpec(8, (lag("x", 0), lag("x", 1), lag("u", 0)))
    model = BaseModel(spec, np.array([0.5, 0.2, 0.001]), 1.0)
    assert variable_count(model) == 2
    assert variable_count(model, "terms") == 3
    assert model.variable_count == 2
    assert variable_count(BaseModel(spec, np.zeros(3), 1.0)) == 0
    assert variable_count(BaseModel(spec, np.array([0.0, 1e-13, 2.0]), 1.0)) == 1
    with pytest.raises(ContractViolation):
        variable_count(model, "columns")

@pytest.mark.parametrize("method", ["mlr", "dict"])
def test_variable_count_recount(simulated_room, method):
    model = fit_room(simulated_room, method, 8)
    recount = set()
    for feature, coefficient in zip(model.spec.features, model.coefficients):
        if abs(coefficient) > 1e-12:
            recount |= feature.variables
    assert variable_count(model) == len(recount)
    assert model.spec.controllable

def test_model_is_affine_in_control(simulated_room, window):
    model = fit_room(simulated_room, "dict", 8)
    low = model_predict(model, window, 0.0)
    high = model_predict(model, window, 2000.0)
    assert model_predict(model, window, 1000.0) == pytest.approx((low + high) / 2.0)

def test_library(simulated_room, linear_room, window):
    library = build_library([simulated_room, linear_room], ("mlr", "dict"), lookback=8)
    assert len(library) == 4
    assert [model.id for model in library] == [0, 1, 2, 3]
    assert [model.method for model in library] == ["mlr", "dict", "mlr", "dict"]
    assert library.lookback == 8
    assert library.truncated(3)[2].id == 2
    assert len(library.truncated(3)) == 3
    assert library.truncated(0) is library
    assert library.variable_counts().shape == (4,)
    predictions = library.predict(window, 500.0)
    assert predictions.shape == (4,)
    assert predictions[1] == model_predict(library[1], window, 500.0)

def test_predict_frame_matches_windows(simulated_room):
    library = build_library([simulated_room], ("mlr", "dict"), lookback=8)
    frame = simulated_room.frame
    predictions, truths, rows = library.predict_frame(frame)
    assert predictions.shape == (len(frame) - 8, 2)
    for i in (0, 50, len(rows) - 1):
        t = rows[i]
        expected = library.predict(window_at(frame, t, 8), frame["u_hvac"].iloc[t])
        np.testing.assert_allclose(predictions[i], expected, rtol=1e-12)
        assert truths[i] == frame["t_room"].iloc[t + 1]
    with pytest.raises(ContractViolation):
        ModelLibrary(()).predict_frame(frame)

def test_library_round_trip(simulated_room, tmp_path):
    library = build_library([simulated_room], ("mlr", "dict"), lookback=8)
    library.save(tmp_path / "models" / "library.json")
    loaded = ModelLibrary.load(tmp_path / "models" / "library.json")
    assert [model.spec for model in loaded] == [model.spec for model in library]
    rng = np.random.default_rng(12)
    timestamps = pd.date_range("2023-11-06", periods=8, freq="15min")
    for _ in range(1000):
        window = TimeSeriesWindow(
            x=rng.uniform(15.0, 25.0, 8),
            u=rng.uniform(0.0, 2000.0, 7),
            d=np.column_stack([rng.uniform(-5.0, 15.0, 8), rng.integers(0, 12, 8), rng.uniform(0.0, 600.0, 8)]),
            timestamps=timestamps,
        )
        u = rng.uniform(0.0, 2000.0)
        assert np.array_equal(loaded.predict(window, u), library.predict(window, u))
