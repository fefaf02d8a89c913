#
# metrics.py
#

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ContractViolation


def compute_metrics(predictions: Sequence[float], truths: Sequence[float]) -> tuple[float, float]:
    """ Mean absolute and mean squared error.

        Raises
        ------
        ContractViolation
            The inputs are empty or differ in length.
    """
    predictions = np.asarray(predictions, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if predictions.size == 0 or predictions.shape != truths.shape:
        raise ContractViolation(
            f"Expected equal, non-empty inputs, instead found {predictions.shape} and {truths.shape}"
        )
    residual = predictions - truths
    return float(np.abs(residual).mean()), float((residual ** 2).mean())


def improvement(method_mae: float, reference_mae: float) -> float:
    """ Relative MAE improvement in percent, `100 * (reference - method) / reference`.

        Raises
        ------
        ContractViolation
            `reference_mae` is not positive.
    """
    if not reference_mae > 0:
        raise ContractViolation(f"Expected a positive reference MAE, instead found {reference_mae}")
    return 100.0 * (reference_mae - method_mae) / reference_mae


@dataclass
class MetricsReport:
    """ Per-room and aggregate errors of every method, with improvements over references.

        `methods` maps a method to `{"mae", "mse", "steps", "rooms": {room: {...}}}`;
        `improvements` maps a method to its Imp.% against each reference.
    """

    methods: dict[str, dict] = field(default_factory=dict)
    improvements: dict[str, dict[str, float]] = field(default_factory=dict)
    references: tuple[str, ...] = ()

    @classmethod
    def from_records(cls, records: Mapping[str, pd.DataFrame], references: Sequence[str] = ()) -> "MetricsReport":
        """ Recomputes every number from record logs.

            The aggregate is taken over all steps, so rooms weigh in by their
            number of steps.
        """
        methods = {}
        for name, frame in records.items():
            rooms = {}
            for room, group in frame.groupby("room", sort=True):
                mae, mse = compute_metrics(group["yhat"], group["ytrue"])
                rooms[str(room)] = {"mae": mae, "mse": mse, "steps": len(group)}
            mae, mse = compute_metrics(frame["yhat"], frame["ytrue"])
            methods[name] = {"mae": mae, "mse": mse, "steps": len(frame), "rooms": rooms}
        improvements = {
            name: {ref: improvement(entry["mae"], methods[ref]["mae"]) for ref in references if ref in methods}
            for name, entry in methods.items()
        }
        return cls(methods, improvements, tuple(references))

    def to_dict(self) -> dict:
        return {"methods": self.methods, "improvements": self.improvements, "references": list(self.references)}

    @classmethod
    def from_dict(cls, document: dict) -> "MetricsReport":
        return cls(document["methods"], document["improvements"], tuple(document.get("references", ())))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def summary(self) -> pd.DataFrame:
        """ One row per method with MAE, MSE and Imp.% per reference. """
        rows = []
        for name, entry in self.methods.items():
            row = {"method": name, "mae": entry["mae"], "mse": entry["mse"], "steps": entry["steps"]}
            for ref, value in self.improvements.get(name, {}).items():
                row[f"imp_vs_{ref}"] = value
            rows.append(row)
        return pd.DataFrame(rows)

    def format(self) -> str:
        """ Human-readable table of :meth:`summary`. """
        table = self.summary()
        lines = [table.to_string(index=False, float_format=lambda value: f"{value:.4f}")]
        if self.references:
            lines.append("")
            lines.append("Imp.% = 100 * (MAE_reference - MAE_method) / MAE_reference")
        return "\n".join(lines)


ENSEMBLE_BASELINES = ("heuristic_top_n", "equal_weight_all", "static_search")


@dataclass(frozen=True)
class OrderingCheck:
    """ Seed-averaged MAE of the compared methods.

        `margin` is the relative MAE reduction of `method` over the best of
        the ensemble baselines, as a fraction.
    """

    mae: dict[str, float]
    margin: float
    method: str = "hierarchical"
    ablation: str = "single_tier_rl"

    @property
    def beats_baselines(self) -> bool:
        return self.margin > 0.0

    @property
    def beats_ablation(self) -> bool:
        return self.mae[self.method] < self.mae[self.ablation]


def check_ordering(
        reports: Sequence[MetricsReport],
        method: str = "hierarchical",
        baselines: Sequence[str] = ENSEMBLE_BASELINES,
        ablation: str = "single_tier_rl",
    ) -> OrderingCheck:
    """ Averages each method's aggregate MAE over runs with different seeds.

        Raises
        ------
        ContractViolation
            No report is given, or some report lacks a compared method.
    """
    if not reports:
        raise ContractViolation("Expected at least one metrics report")
    names = (method, *baselines, ablation)
    for report in reports:
        missing = [name for name in names if name not in report.methods]
        if missing:
            raise ContractViolation(f"Metrics report lacks the methods {missing}")
    mae = {name: float(np.mean([report.methods[name]["mae"] for report in reports])) for name in names}
    best = min(mae[name] for name in baselines)
    return OrderingCheck(mae, improvement(mae[method], best) / 100.0, method, ablation)
