#
# encoder.py
#

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats

from .autodiff import ParameterSet, Tensor, as_tensor, concat, matmul, relu, swapaxes, tanh
from .errors import ContractViolation
from .features import TimeSeriesWindow
from .layers import add_conv, add_dense, dense, dilated_causal_conv1d, masked_softmax
from .simulator import DISTURBANCE_COLUMNS


class EncoderConfig(BaseModel):
    """ Architecture of the shared state encoder. """

    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden: int = Field(64, gt=0)
    kernel: int = Field(4, gt=0)
    dilations: tuple[int, ...] = (1, 2, 4)
    lookback: int = Field(8, gt=1)
    n_disturbances: int = Field(len(DISTURBANCE_COLUMNS), gt=0)
    representation: Literal["tcn", "dense"] = "tcn"
    error_embedding: Literal["rank", "raw"] = "rank"

    @property
    def receptive_field(self) -> int:
        """ :class:`int`: Steps that can influence the last output of a TCN stack. """
        return 1 + 2 * (self.kernel - 1) * sum(self.dilations)

    @property
    def state_size(self) -> int:
        return 2 * self.hidden


@dataclass
class NormalizationStats:
    """ Per-channel means and standard deviations of the encoder inputs. """

    x_mean: float = 0.0
    x_std: float = 1.0
    u_mean: float = 0.0
    u_std: float = 1.0
    d_mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    d_std: tuple[float, ...] = (1.0, 1.0, 1.0)

    @classmethod
    def fit(cls, frames: Iterable[pd.DataFrame]) -> "NormalizationStats":
        """ Estimates the statistics over the rows of every frame. """
        data = pd.concat(list(frames), ignore_index=True)
        if data.empty:
            raise ContractViolation("Cannot fit normalisation statistics on no data")

        def std(values) -> np.ndarray:
            # Constant channels keep unit scale
            spread = np.asarray(values, dtype=float)
            return np.where(spread > 1e-12, spread, 1.0)

        disturbances = data[list(DISTURBANCE_COLUMNS)]
        return cls(
            x_mean=float(data["t_room"].mean()),
            x_std=float(std(data["t_room"].std(ddof=0))),
            u_mean=float(data["u_hvac"].mean()),
            u_std=float(std(data["u_hvac"].std(ddof=0))),
            d_mean=tuple(disturbances.mean().tolist()),
            d_std=tuple(std(disturbances.std(ddof=0).to_numpy()).tolist()),
        )

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean, "x_std": self.x_std,
            "u_mean": self.u_mean, "u_std": self.u_std,
            "d_mean": list(self.d_mean), "d_std": list(self.d_std),
        }

    @classmethod
    def from_dict(cls, document: dict) -> "NormalizationStats":
        return cls(
            document["x_mean"], document["x_std"], document["u_mean"], document["u_std"],
            tuple(document["d_mean"]), tuple(document["d_std"]),
        )


def rank_normalize(errors: np.ndarray) -> np.ndarray:
    """ Maps errors to average ranks scaled into [0, 1] along the last axis.

        A single model is placed at 0.5.
    """
    errors = np.asarray(errors, dtype=float)
    n = errors.shape[-1]
    if n == 1:
        return np.full(errors.shape, 0.5)
    return (stats.rankdata(errors, method="average", axis=-1) - 1.0) / (n - 1.0)


def _pad_controls(u: np.ndarray) -> np.ndarray:
    """ Left-pads (B, L-1) controls to (B, L) by repeating their first value. """
    return np.concatenate([u[:, :1], u], axis=1)


class Encoder:
    """ Maps a data window and the last per-model errors to the state vector.

        The window part runs one TCN stack over indoor temperatures (queries)
        and one each over controls and disturbances (keys and values), fuses
        them with causally masked cross-attention and reads the output at the
        final step. The error part ranks the errors and projects them with a
        dense tanh layer. With `representation="dense"` the TCN stacks and the
        attention are replaced by one dense layer over the flattened window.

        Parameters
        ----------
        config: :class:`EncoderConfig`
            The architecture.
        n_models: :class:`int`
            Size of the model library, the length of the error vector.
        params: :class:`ParameterSet`
            Trainable weights, all prefixed with `encoder.`.
        stats: :class:`NormalizationStats`
            Input normalisation.
    """

    prefix = "encoder"

    def __init__(
            self,
            config: EncoderConfig,
            n_models: int,
            params: ParameterSet,
            stats: NormalizationStats | None = None,
        ) -> None:
        self.config = config
        self.n_models = n_models
        self.params = params
        self.stats = stats or NormalizationStats(
            d_mean=(0.0,) * config.n_disturbances, d_std=(1.0,) * config.n_disturbances
        )

    @classmethod
    def initialize(
            cls,
            config: EncoderConfig,
            n_models: int,
            rng: np.random.Generator,
            stats: NormalizationStats | None = None,
            prefix: str = "encoder",
        ) -> "Encoder":
        """ Draws Glorot-uniform weights and zero biases. """
        params = ParameterSet()
        h = config.hidden
        if config.representation == "tcn":
            for stack, channels in (("tcn_x", 1), ("tcn_u", 1), ("tcn_d", config.n_disturbances)):
                for b in range(len(config.dilations)):
                    n_in = channels if b == 0 else h
                    add_conv(params, f"{prefix}.{stack}.{b}.conv0", config.kernel, n_in, h, rng)
                    add_conv(params, f"{prefix}.{stack}.{b}.conv1", config.kernel, h, h, rng)
                    if n_in != h:
                        add_dense(params, f"{prefix}.{stack}.{b}.skip", n_in, h, rng)
            add_dense(params, f"{prefix}.query", h, h, rng)
            add_dense(params, f"{prefix}.key", 2 * h, h, rng)
            add_dense(params, f"{prefix}.value", 2 * h, h, rng)
        else:
            flat = config.lookback * (2 + config.n_disturbances)
            add_dense(params, f"{prefix}.window", flat, h, rng)
        add_dense(params, f"{prefix}.errors", n_models, h, rng)
        encoder = cls(config, n_models, params, stats)
        encoder.prefix = prefix
        return encoder

    def _tcn(self, inputs: Tensor, stack: str) -> Tensor:
        h = inputs
        for b, dilation in enumerate(self.config.dilations):
            name = f"{self.prefix}.{stack}.{b}"
            out = relu(dilated_causal_conv1d(
                h, self.params[f"{name}.conv0.weight"], self.params[f"{name}.conv0.bias"], dilation
            ))
            out = relu(dilated_causal_conv1d(
                out, self.params[f"{name}.conv1.weight"], self.params[f"{name}.conv1.bias"], dilation
            ))
            skip = dense(h, self.params, f"{name}.skip") if f"{name}.skip.weight" in self.params else h
            h = relu(out + skip)
        return h

    def _normalize(self, x: np.ndarray, u: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        s = self.stats
        x = (np.asarray(x, dtype=float) - s.x_mean) / s.x_std
        u = (_pad_controls(np.asarray(u, dtype=float)) - s.u_mean) / s.u_std
        d = (np.asarray(d, dtype=float) - np.asarray(s.d_mean)) / np.asarray(s.d_std)
        return x, u, d

    def attention(self, x: np.ndarray, u: np.ndarray, d: np.ndarray) -> tuple[Tensor, Tensor]:
        """ Runs the TCN stacks and the cross-attention over a batch of windows.

            Parameters
            ----------
            x: :class:`numpy.ndarray`
                Indoor temperatures, shape (B, L).
            u: :class:`numpy.ndarray`
                Past controls, shape (B, L-1).
            d: :class:`numpy.ndarray`
                Disturbances, shape (B, L, c).

            Returns
            -------
            tuple[:class:`Tensor`, :class:`Tensor`]
                Attention weights (B, L, L) and attended values (B, L, d_h).
        """
        x, u, d = self._normalize(x, u, d)
        h_q = self._tcn(as_tensor(x[..., None]), "tcn_x")
        h_kv = concat([self._tcn(as_tensor(u[..., None]), "tcn_u"), self._tcn(as_tensor(d), "tcn_d")], axis=-1)
        q = dense(h_q, self.params, f"{self.prefix}.query")
        k = dense(h_kv, self.params, f"{self.prefix}.key")
        v = dense(h_kv, self.params, f"{self.prefix}.value")
        scores = matmul(q, swapaxes(k, -1, -2)) / np.sqrt(self.config.hidden)
        steps = scores.shape[-1]
        weights = masked_softmax(scores, np.tril(np.ones((steps, steps), dtype=bool)))
        return weights, matmul(weights, v)

    def encode_windows(self, x: np.ndarray, u: np.ndarray, d: np.ndarray) -> Tensor:
        """ Window embeddings `e_d` of shape (B, d_h). """
        if self.config.representation == "dense":
            x, u, d = self._normalize(x, u, d)
            flat = np.concatenate([x, u, d.reshape(len(x), -1)], axis=1)
            return tanh(dense(as_tensor(flat), self.params, f"{self.prefix}.window"))
        _, attended = self.attention(x, u, d)
        return attended[:, -1, :]

    def embed_errors(self, errors: np.ndarray) -> Tensor:
        """ Error embeddings `e_m` of shape (B, d_h) from (B, N) squared errors. """
        errors = np.asarray(errors, dtype=float)
        if errors.shape[-1] != self.n_models:
            raise ContractViolation(f"Expected {self.n_models} model errors, instead found {errors.shape[-1]}")
        if np.any(errors < 0):
            raise ContractViolation("Model errors must be non-negative")
        features = rank_normalize(errors) if self.config.error_embedding == "rank" else np.log1p(errors)
        return tanh(dense(as_tensor(features), self.params, f"{self.prefix}.errors"))

    def encode(self, x: np.ndarray, u: np.ndarray, d: np.ndarray, errors: np.ndarray) -> Tensor:
        """ State vectors `e_d + e_m` (concatenated) of shape (B, 2 d_h). """
        return concat([self.encode_windows(x, u, d), self.embed_errors(errors)], axis=-1)

    def to_dict(self) -> dict:
        return {
            "config": self.config.model_dump(mode="json"),
            "n_models": self.n_models,
            "prefix": self.prefix,
            "stats": self.stats.to_dict(),
            "params": self.params.to_dict(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Encoder":
        document = json.loads(Path(path).read_text())
        encoder = cls(
            EncoderConfig(**document["config"]),
            document["n_models"],
            ParameterSet.from_dict(document["params"]),
            NormalizationStats.from_dict(document["stats"]),
        )
        encoder.prefix = document["prefix"]
        return encoder


def _batch(window: TimeSeriesWindow) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return window.x[None, :], window.u[None, :], window.d[None, :, :]


def encode_window(window: TimeSeriesWindow, encoder: Encoder) -> np.ndarray:
    """ Returns `e_d` for one window. """
    return encoder.encode_windows(*_batch(window)).values[0]


def embed_errors(errors: np.ndarray, encoder: Encoder) -> np.ndarray:
    """ Returns `e_m` for one vector of last-step squared errors. """
    return encoder.embed_errors(np.asarray(errors, dtype=float)[None, :]).values[0]


def build_state(window: TimeSeriesWindow, errors: np.ndarray, encoder: Encoder) -> np.ndarray:
    """ Returns the state `e_d` followed by `e_m`. """
    return encoder.encode(*_batch(window), np.asarray(errors, dtype=float)[None, :]).values[0]
