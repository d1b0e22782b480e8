"""Dilated causal CNN forecaster: a plain stack of width-2 dilated convolutions
(dilations 1, 2, 4, ...) with ReLU, then dense(128, ReLU) and dense(1) applied
at a time position to predict the next value.

History is treated as left-padded with zeros out to the receptive field. In
that padded stretch every layer sits at a constant "steady-state" activation,
so instead of materialising 2**n_layers zeros each layer is padded with its
steady-state vector. This is exact, and the steady states are differentiated
like any other activation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np

from ..nn import (AdamState, TrainingError, XorShift64Star, adam_step, clip_by_global_norm,
                  dilated_conv1d_backward, dilated_conv1d_forward, glorot_uniform, mae_loss)
from ..nn.layers import ShapeError
from .state import MAX_GRAD_NORM, ModelState


@dataclass(frozen=True)
class DcnnForecasterConfig:
    n_layers: int = 10
    filters: int = 6
    kernel_width: int = 2
    head_size: int = 128
    use_covariates: bool = False
    n_covariates: int = 0
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.n_layers < 1 or self.filters < 1 or self.kernel_width < 1 or self.head_size < 1:
            raise ValueError("n_layers, filters, kernel_width and head_size must be >= 1")

    @property
    def dilations(self) -> List[int]:
        return [2 ** l for l in range(self.n_layers)]

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_width - 1) * sum(self.dilations)

    @property
    def in_channels(self) -> int:
        return 1 + (self.n_covariates if self.use_covariates else 0)

    def param_shapes(self) -> dict:
        shapes = {}
        c_in = self.in_channels
        for l in range(self.n_layers):
            shapes[f"conv{l}.W"] = (self.filters, c_in, self.kernel_width)
            shapes[f"conv{l}.b"] = (self.filters,)
            c_in = self.filters
        shapes["head1.W"] = (self.filters, self.head_size)
        shapes["head1.b"] = (self.head_size,)
        shapes["head2.W"] = (self.head_size, 1)
        shapes["head2.b"] = (1,)
        return shapes


class DcnnBatch(NamedTuple):
    """Right-aligned histories.

    ``series`` (B, T) holds transformed values and ``observed`` (B, T) marks
    real observations; unobserved leading positions are treated as padding.
    Every observed position whose next value is also observed is a target.
    """

    series: np.ndarray
    observed: np.ndarray
    covariates: Optional[np.ndarray] = None

    def target_mask(self) -> np.ndarray:
        obs = self.observed.astype(bool)
        m = np.zeros_like(obs)
        m[:, :-1] = obs[:, :-1] & obs[:, 1:]
        return m


def init_dcnn(config: DcnnForecasterConfig, seed: int) -> ModelState:
    rng = XorShift64Star(seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        elif len(shape) == 3:
            params[name] = glorot_uniform(rng, shape, shape[1] * shape[2], shape[0] * shape[2])
        else:
            params[name] = glorot_uniform(rng, shape, shape[0], shape[1])
    return ModelState("dcnn", config, params, AdamState(learning_rate=config.learning_rate))


def build_inputs(series: np.ndarray, observed: np.ndarray, covariates: Optional[np.ndarray],
                 config: DcnnForecasterConfig) -> np.ndarray:
    """(B, channels, T) input: the series plus covariate channels that are constant
    over observed positions and zero before them."""
    x = np.where(observed, series, 0.0)[:, None, :]
    if config.use_covariates:
        if covariates is None or covariates.shape != (series.shape[0], config.n_covariates):
            raise ShapeError(f"expected covariates of shape ({series.shape[0]}, {config.n_covariates})")
        cov = covariates[:, :, None] * observed[:, None, :]
        x = np.concatenate([x, cov], axis=1)
    return x


def forward(params, config: DcnnForecasterConfig, x: np.ndarray):
    """Head outputs at every position, shape (B, T), and the cache for ``backward``."""
    if x.ndim != 3 or x.shape[1] != config.in_channels:
        raise ShapeError(f"expected (B, {config.in_channels}, T) input, got {x.shape}")
    pad = np.zeros(config.in_channels)
    layers = []
    a = x
    for l, d in enumerate(config.dilations):
        p = {"W": params[f"conv{l}.W"], "b": params[f"conv{l}.b"]}
        pre, conv_cache = dilated_conv1d_forward(a, p, d, config.kernel_width, pad=pad)
        pad_pre = p["W"].sum(axis=2) @ pad + p["b"]
        layers.append((conv_cache, pre > 0, pad, pad_pre > 0))
        a = np.maximum(pre, 0.0)
        pad = np.maximum(pad_pre, 0.0)
    feats = a.transpose(0, 2, 1)                      # (B, T, filters)
    B, T, F = feats.shape
    f2 = feats.reshape(B * T, F)
    z1 = f2 @ params["head1.W"] + params["head1.b"]
    r1 = np.maximum(z1, 0.0)
    out = (r1 @ params["head2.W"])[:, 0] + params["head2.b"][0]
    return out.reshape(B, T), (layers, f2, z1 > 0, r1, (B, T, F))


def backward(params, config: DcnnForecasterConfig, dout: np.ndarray, cache):
    """Parameter gradients and d(loss)/d(input) for a (B, T) output gradient."""
    layers, f2, m1, r1, (B, T, F) = cache
    g = {}
    d2 = dout.reshape(-1, 1)
    g["head2.W"] = r1.T @ d2
    g["head2.b"] = np.array([d2.sum()])
    dz1 = (d2 @ params["head2.W"].T) * m1
    g["head1.W"] = f2.T @ dz1
    g["head1.b"] = dz1.sum(axis=0)
    da = (dz1 @ params["head1.W"].T).reshape(B, T, F).transpose(0, 2, 1)
    dpad_out = np.zeros(config.filters)
    for l in range(config.n_layers - 1, -1, -1):
        conv_cache, mask, pad_in, pad_mask = layers[l]
        W = params[f"conv{l}.W"]
        dpre = da * mask
        da, dpad_in, gc = dilated_conv1d_backward(dpre, conv_cache, {"W": W, "b": params[f"conv{l}.b"]})
        # the steady-state pad of this layer's output feeds the next layer's padding
        dpad_pre = dpad_out * pad_mask
        gc["W"] += dpad_pre[:, None, None] * pad_in[None, :, None]
        gc["b"] += dpad_pre
        dpad_out = dpad_in + W.sum(axis=2).T @ dpad_pre
        g[f"conv{l}.W"] = gc["W"]
        g[f"conv{l}.b"] = gc["b"]
    return g, da


def batch_loss(params, config: DcnnForecasterConfig, batch: DcnnBatch):
    observed = batch.observed.astype(bool)
    x = build_inputs(batch.series, observed, batch.covariates, config)
    out, cache = forward(params, config, x)
    target = np.zeros_like(out)
    target[:, :-1] = batch.series[:, 1:]
    loss, dout = mae_loss(out, target, batch.target_mask())
    return loss, dout, cache


def dcnn_train_step(batch: DcnnBatch, state: ModelState):
    """One MAE step over every target position (teacher forcing on true history)."""
    loss, dout, cache = batch_loss(state.params, state.config, batch)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite DCNN loss {loss!r} at Adam step {state.adam.step}")
    grads, _ = backward(state.params, state.config, dout, cache)
    clip_by_global_norm(grads, MAX_GRAD_NORM)
    adam_step(state.params, grads, state.adam)
    return loss, state


def predict_next(history: np.ndarray, state: ModelState, covariates: Optional[np.ndarray] = None,
                 observed: Optional[np.ndarray] = None) -> np.ndarray:
    """Next-value prediction for each row of a (B, n) batch of histories.

    ``observed`` marks real values in right-aligned histories of unequal
    length; leading unobserved positions behave exactly like padding.
    """
    h = np.atleast_2d(np.asarray(history, dtype=np.float64))
    obs = np.ones(h.shape, dtype=bool) if observed is None else np.atleast_2d(np.asarray(observed, dtype=bool))
    x = build_inputs(h, obs, covariates, state.config)
    out, _ = forward(state.params, state.config, x)
    return out[:, -1]


def dcnn_forecast(history, state: ModelState, horizon: int,
                  covariates: Optional[np.ndarray] = None, observed: Optional[np.ndarray] = None) -> np.ndarray:
    """Predict-and-append for ``horizon`` steps. ``history`` is (n,) or (B, n)."""
    h = np.asarray(history, dtype=np.float64)
    single = h.ndim == 1
    h = np.atleast_2d(h)
    if h.shape[1] < 1:
        raise ShapeError("history must be non-empty")
    obs = np.ones(h.shape, dtype=bool) if observed is None else np.atleast_2d(np.asarray(observed, dtype=bool))
    if obs.shape != h.shape:
        raise ShapeError(f"observed mask {obs.shape} does not match history {h.shape}")
    if not obs[:, -1].all():
        raise ShapeError("histories must be right-aligned (last position observed)")
    if single and covariates is not None:
        covariates = np.asarray(covariates, dtype=np.float64)[None]
    out = np.empty((h.shape[0], horizon))
    for j in range(horizon):
        nxt = predict_next(h, state, covariates, obs)
        out[:, j] = nxt
        h = np.concatenate([h, nxt[:, None]], axis=1)
        obs = np.concatenate([obs, np.ones((obs.shape[0], 1), dtype=bool)], axis=1)
    return out[0] if single else out
