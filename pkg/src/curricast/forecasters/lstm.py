"""Single-layer encoder-decoder LSTM with a dense output head.

Training uses teacher forcing: decoder step j is fed the actual value of
step j - 1 (step 0 gets the last encoder observation). Inference feeds the
decoder its own previous prediction instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from ..nn import (AdamState, TrainingError, XorShift64Star, adam_step, clip_by_global_norm,
                  glorot_uniform, lstm_gates, lstm_gates_backward, mae_loss)
from ..nn.layers import ShapeError
from .state import MAX_GRAD_NORM, ModelState


class InsufficientHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class LstmForecasterConfig:
    hidden_size: int = 64
    encoder_length: int = 11
    horizon: int = 4
    use_covariates: bool = False
    use_seasonality: bool = False
    n_covariates: int = 0
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.hidden_size < 1 or self.encoder_length < 1 or self.horizon < 1:
            raise ValueError("hidden_size, encoder_length and horizon must be >= 1")
        if self.n_covariates < 0:
            raise ValueError("n_covariates must be >= 0")

    @property
    def window_size(self) -> int:
        return self.encoder_length + self.horizon

    @property
    def covariate_size(self) -> int:
        return self.n_covariates if self.use_covariates else 0

    @property
    def input_size(self) -> int:
        return 1 + self.covariate_size

    def param_shapes(self) -> dict:
        I, H = self.input_size, self.hidden_size
        return {
            "enc.Wx": (I, 4 * H), "enc.Wh": (H, 4 * H), "enc.b": (4 * H,),
            "dec.Wx": (I, 4 * H), "dec.Wh": (H, 4 * H), "dec.b": (4 * H,),
            "out.W": (H, 1), "out.b": (1,),
        }


class LstmBatch(NamedTuple):
    encoder: np.ndarray                # (B, encoder_length) transformed values
    targets: np.ndarray                # (B, horizon) next values
    covariates: Optional[np.ndarray] = None  # (B, n_covariates)


def init_lstm(config: LstmForecasterConfig, seed: int) -> ModelState:
    rng = XorShift64Star(seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = glorot_uniform(rng, shape, shape[0], shape[1])
    return ModelState("lstm", config, params, AdamState(learning_rate=config.learning_rate))


def _inputs(values: np.ndarray, cov: Optional[np.ndarray], config: LstmForecasterConfig) -> np.ndarray:
    x = values[..., None]
    if config.use_covariates:
        if cov is None or cov.shape != (values.shape[0], config.n_covariates):
            raise ShapeError(f"expected covariates of shape ({values.shape[0]}, {config.n_covariates})")
        x = np.concatenate([x, np.broadcast_to(cov[:, None, :], values.shape + (cov.shape[1],))], axis=-1)
    return x


def _project(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    # (B, S, I) @ (I, 4H) as one 2-d GEMM, laid out time-major for contiguous step slices
    B, S, I = x.shape
    z = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(S * B, I) @ W + b
    return z.reshape(S, B, -1)


def _step(x_proj: np.ndarray, h: np.ndarray, c: np.ndarray, Wh: np.ndarray):
    h_new, c_new, gc = lstm_gates(x_proj + h @ Wh, c)
    return h_new, c_new, (h, gc)


def _backward_through_time(dhs, dh, dc, caches, Wh):
    """BPTT over cached steps; ``dhs`` (B, S, H) holds per-step output grads or None."""
    S = len(caches)
    B, H = dh.shape
    dZ = np.empty((B, S, Wh.shape[1]))
    WhT = Wh.T
    for t in range(S - 1, -1, -1):
        if dhs is not None:
            dh = dh + dhs[:, t]
        dz, dc = lstm_gates_backward(dh, dc, caches[t][1])
        dZ[:, t] = dz
        dh = dz @ WhT
    h_prev = np.stack([c[0] for c in caches], axis=1)
    dWh = h_prev.reshape(-1, H).T @ dZ.reshape(-1, Wh.shape[1])
    return dZ, dWh, dh, dc


def _encode(params, x_enc):
    B = x_enc.shape[0]
    H = params["enc.Wh"].shape[0]
    Zx = _project(x_enc, params["enc.Wx"], params["enc.b"])
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    caches = []
    for t in range(x_enc.shape[1]):
        h, c, cache = _step(Zx[t], h, c, params["enc.Wh"])
        caches.append(cache)
    return h, c, caches


def forward_teacher_forced(params, config: LstmForecasterConfig, batch: LstmBatch):
    """Decoder predictions under teacher forcing and the cache for ``backward``."""
    enc = np.asarray(batch.encoder, dtype=np.float64)
    tgt = np.asarray(batch.targets, dtype=np.float64)
    if enc.ndim != 2 or enc.shape[1] != config.encoder_length:
        raise ShapeError(f"encoder inputs must be (B, {config.encoder_length}), got {enc.shape}")
    if tgt.shape != (enc.shape[0], tgt.shape[1]) or tgt.shape[1] < 1:
        raise ShapeError(f"targets must be (B, horizon), got {tgt.shape}")
    x_enc = _inputs(enc, batch.covariates, config)
    h, c, enc_caches = _encode(params, x_enc)

    dec_in = np.concatenate([enc[:, -1:], tgt[:, :-1]], axis=1)
    x_dec = _inputs(dec_in, batch.covariates, config)
    Wx, b, Wh = params["dec.Wx"], params["dec.b"], params["dec.Wh"]
    hs = np.empty((enc.shape[0], tgt.shape[1], config.hidden_size))
    preds = np.empty(tgt.shape)
    dec_caches = []
    # same per-step arithmetic as lstm_forecast, so matching inputs give bit-identical outputs
    for j in range(tgt.shape[1]):
        h, c, cache = _step(x_dec[:, j] @ Wx + b, h, c, Wh)
        dec_caches.append(cache)
        hs[:, j] = h
        preds[:, j] = h @ params["out.W"][:, 0] + params["out.b"][0]
    return preds, (x_enc, enc_caches, x_dec, dec_caches, hs, dec_in)


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def backward(params, dpreds: np.ndarray, cache):
    """Gradients for all parameters plus d(loss)/d(encoder inputs) and d/d(decoder inputs)."""
    x_enc, enc_caches, x_dec, dec_caches, hs, _ = cache
    H = hs.shape[-1]
    grads = {
        "out.W": hs.reshape(-1, H).T @ dpreds.reshape(-1, 1),
        "out.b": np.array([dpreds.sum()]),
    }
    dhs = dpreds[..., None] * params["out.W"][:, 0]
    zero = np.zeros((hs.shape[0], H))
    dZd, grads["dec.Wh"], dh, dc = _backward_through_time(dhs, zero, zero, dec_caches, params["dec.Wh"])
    grads["dec.Wx"] = _flat(x_dec).T @ _flat(dZd)
    grads["dec.b"] = dZd.sum(axis=(0, 1))
    dZe, grads["enc.Wh"], _, _ = _backward_through_time(None, dh, dc, enc_caches, params["enc.Wh"])
    grads["enc.Wx"] = _flat(x_enc).T @ _flat(dZe)
    grads["enc.b"] = dZe.sum(axis=(0, 1))
    dx_enc = (_flat(dZe) @ params["enc.Wx"].T).reshape(dZe.shape[:2] + (-1,))
    dx_dec = (_flat(dZd) @ params["dec.Wx"].T).reshape(dZd.shape[:2] + (-1,))
    return grads, dx_enc, dx_dec


def loss_and_grads(params, config: LstmForecasterConfig, batch: LstmBatch):
    preds, cache = forward_teacher_forced(params, config, batch)
    loss, dpreds = mae_loss(preds, batch.targets)
    grads, dx_enc, dx_dec = backward(params, dpreds, cache)
    # encoder values also reach the first decoder input
    d_enc_values = dx_enc[..., 0].copy()
    d_enc_values[:, -1] += dx_dec[:, 0, 0]
    return loss, grads, d_enc_values


def lstm_train_step(batch: LstmBatch, state: ModelState):
    """One teacher-forced MAE step with global-norm clipping and an Adam update."""
    loss, grads, _ = loss_and_grads(state.params, state.config, batch)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite LSTM loss {loss!r} at Adam step {state.adam.step} "
                            f"(batch of {len(batch.encoder)})")
    clip_by_global_norm(grads, MAX_GRAD_NORM)
    adam_step(state.params, grads, state.adam)
    return loss, state


def lstm_forecast(history, state: ModelState, horizon: int,
                  covariates: Optional[np.ndarray] = None, *, return_decoder_inputs: bool = False):
    """Autoregressive forecasts from the last ``encoder_length`` values of ``history``.

    ``history`` is (n,) for one row or (B, n) for a batch of equally long
    histories; covariates are (n_covariates,) or (B, n_covariates).
    """
    config: LstmForecasterConfig = state.config
    params = state.params
    hist = np.asarray(history, dtype=np.float64)
    single = hist.ndim == 1
    if single:
        hist = hist[None]
        if covariates is not None:
            covariates = np.asarray(covariates, dtype=np.float64)[None]
    if hist.shape[1] < config.encoder_length:
        raise InsufficientHistoryError(
            f"need {config.encoder_length} observed quarters, got {hist.shape[1]}")
    B = hist.shape[0]
    out = np.empty((B, horizon))
    inputs = np.empty((B, horizon))
    if horizon > 0:
        enc = hist[:, -config.encoder_length:]
        h, c, _ = _encode(params, _inputs(enc, covariates, config))
        Wx, b, Wh = params["dec.Wx"], params["dec.b"], params["dec.Wh"]
        prev = enc[:, -1]
        for j in range(horizon):
            inputs[:, j] = prev
            x = _inputs(prev[:, None], covariates, config)[:, 0]
            h, c, _ = _step(x @ Wx + b, h, c, Wh)
            prev = h @ params["out.W"][:, 0] + params["out.b"][0]
            out[:, j] = prev
    if single:
        out, inputs = out[0], inputs[0]
    return (out, inputs) if return_decoder_inputs else out
