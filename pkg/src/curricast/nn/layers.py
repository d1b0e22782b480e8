"""Layers with hand-derived backward passes.

Every forward function returns its outputs plus a cache; the matching
backward function takes the upstream gradient and the cache and returns
gradients for the inputs and parameters. Arrays are float64 throughout.
"""

from __future__ import annotations

import functools
from typing import Mapping

import numpy as np


class ShapeError(ValueError):
    pass


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# --- dense ---------------------------------------------------------------

def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    _check(x.shape[-1] == W.shape[0], f"dense: input width {x.shape[-1]} != {W.shape[0]}")
    return x @ W + b, x


def dense_backward(dy: np.ndarray, W: np.ndarray, cache):
    """Returns ``(dx, dW, db)``."""
    x = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)


# --- relu ----------------------------------------------------------------

def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, dy, 0.0)


# --- lstm cell -----------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _gate_constants(H: int):
    # sigmoid(z) = 0.5 * tanh(z / 2) + 0.5 on the i, f, o blocks; plain tanh on g
    scale = np.full(4 * H, 0.5)
    scale[2 * H:3 * H] = 1.0
    add = np.full(4 * H, 0.5)
    add[2 * H:3 * H] = 0.0
    # d(activation)/dz = slope * (1 - tanh^2)
    slope = np.full(4 * H, 0.25)
    slope[2 * H:3 * H] = 1.0
    for arr in (scale, add, slope):
        arr.setflags(write=False)
    return scale, add, slope


def lstm_gates(z: np.ndarray, c_prev: np.ndarray):
    """Gate nonlinearities given pre-activations ``z`` (batch, 4H).

    Blocks are ordered input, forget, candidate, output.
    """
    H = c_prev.shape[-1]
    scale, add, _ = _gate_constants(H)
    t = np.tanh(z * scale)
    act = t * scale + add
    i = act[..., :H]
    f = act[..., H:2 * H]
    g = act[..., 2 * H:3 * H]
    o = act[..., 3 * H:]
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return o * tc, c, (c_prev, act, t, tc)


def lstm_gates_backward(dh: np.ndarray, dc: np.ndarray, cache):
    """Returns ``(dz, dc_prev)``."""
    c_prev, act, t, tc = cache
    H = c_prev.shape[-1]
    _, _, slope = _gate_constants(H)
    i = act[..., :H]
    f = act[..., H:2 * H]
    g = act[..., 2 * H:3 * H]
    o = act[..., 3 * H:]
    dc = dc + dh * o * (1.0 - tc * tc)
    dact = np.empty_like(act)
    np.multiply(dc, g, out=dact[..., :H])
    np.multiply(dc, c_prev, out=dact[..., H:2 * H])
    np.multiply(dc, i, out=dact[..., 2 * H:3 * H])
    np.multiply(dh, tc, out=dact[..., 3 * H:])
    dz = dact * slope * (1.0 - t * t)
    return dz, dc * f


def _check_lstm(params, x, h_prev, c_prev):
    Wx, Wh, b = params["Wx"], params["Wh"], params["b"]
    H = Wh.shape[0]
    _check(Wx.shape[1] == 4 * H and Wh.shape[1] == 4 * H and b.shape == (4 * H,),
           "lstm: inconsistent parameter shapes")
    _check(x.shape[-1] == Wx.shape[0], f"lstm: input width {x.shape[-1]} != {Wx.shape[0]}")
    _check(h_prev.shape[-1] == H and c_prev.shape[-1] == H, "lstm: state width mismatch")


def lstm_cell_forward(x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray,
                      params: Mapping[str, np.ndarray]):
    """One LSTM step.

    ``params`` holds ``Wx`` (input, 4H), ``Wh`` (H, 4H) and ``b`` (4H,), gate
    blocks ordered input, forget, candidate, output. Returns ``(h, c, cache)``.
    """
    _check_lstm(params, x, h_prev, c_prev)
    z = x @ params["Wx"] + h_prev @ params["Wh"] + params["b"]
    h, c, gcache = lstm_gates(z, c_prev)
    return h, c, (x, h_prev, gcache)


def lstm_cell_backward(dh: np.ndarray, dc: np.ndarray, cache,
                       params: Mapping[str, np.ndarray]):
    """Returns ``(dx, dh_prev, dc_prev, {"Wx", "Wh", "b"} grads)``."""
    x, h_prev, gcache = cache
    dz, dc_prev = lstm_gates_backward(dh, dc, gcache)
    x2 = np.atleast_2d(x)
    h2 = np.atleast_2d(h_prev)
    dz2 = np.atleast_2d(dz)
    grads = {"Wx": x2.T @ dz2, "Wh": h2.T @ dz2, "b": dz2.sum(axis=0)}
    return dz @ params["Wx"].T, dz @ params["Wh"].T, dc_prev, grads


# --- dilated causal conv -------------------------------------------------

def _taps(width: int, dilation: int):
    # tap k reads the input (width - 1 - k) * dilation steps in the past
    return [(k, (width - 1 - k) * dilation) for k in range(width)]


def dilated_conv1d_forward(x: np.ndarray, params: Mapping[str, np.ndarray],
                           dilation: int, width: int = 2,
                           pad: np.ndarray | None = None):
    """Causal dilated convolution over (batch, channels, time) or (channels, time).

    ``params["W"]`` is (out, in, width) and ``params["b"]`` is (out,). The
    input is extended to the left by ``(width - 1) * dilation`` steps filled
    with ``pad`` (a per-channel value, zeros by default), so the output has
    the input's length and position t only sees times <= t.
    """
    W, b = params["W"], params["b"]
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    _check(x.ndim == 3, "conv: expected (batch, channels, time)")
    B, C, T = x.shape
    _check(W.shape[1] == C and W.shape[2] == width, f"conv: weight shape {W.shape} vs input channels {C}")
    _check(b.shape == (W.shape[0],), "conv: bias shape mismatch")
    P = (width - 1) * dilation
    if pad is None:
        pad = np.zeros(C)
    _check(pad.shape == (C,), "conv: pad must be one value per input channel")
    xp = np.concatenate([np.broadcast_to(pad[None, :, None], (B, C, P)), x], axis=2)
    out = np.broadcast_to(b[None, :, None], (B, W.shape[0], T)).copy()
    for k, lag in _taps(width, dilation):
        out += np.matmul(W[:, :, k], xp[:, :, P - lag:P - lag + T])
    cache = (xp, dilation, width, squeeze)
    return (out[0] if squeeze else out), cache


def dilated_conv1d_backward(dout: np.ndarray, cache, params: Mapping[str, np.ndarray]):
    """Returns ``(dx, dpad, {"W", "b"} grads)``."""
    xp, dilation, width, squeeze = cache
    W = params["W"]
    if squeeze:
        dout = dout[None]
    B, C, Tp = xp.shape
    T = dout.shape[2]
    P = Tp - T
    dW = np.zeros_like(W)
    dxp = np.zeros_like(xp)
    for k, lag in _taps(width, dilation):
        xs = xp[:, :, P - lag:P - lag + T]
        dW[:, :, k] = np.tensordot(dout, xs, axes=([0, 2], [0, 2]))
        dxp[:, :, P - lag:P - lag + T] += np.matmul(W[:, :, k].T, dout)
    db = dout.sum(axis=(0, 2))
    dx = dxp[:, :, P:]
    dpad = dxp[:, :, :P].sum(axis=(0, 2))
    return (dx[0] if squeeze else dx), dpad, {"W": dW, "b": db}


# --- loss ----------------------------------------------------------------

def mae_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None):
    """Mean absolute error and its (sub)gradient; ties get gradient 0.

    With ``mask`` the mean runs over the selected entries only.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check(pred.shape == target.shape, f"mae: shapes {pred.shape} and {target.shape} differ")
    diff = pred - target
    if mask is None:
        n = diff.size
        w = 1.0
    else:
        _check(mask.shape == pred.shape, "mae: mask shape mismatch")
        n = int(mask.sum())
        w = mask.astype(np.float64)
    if n == 0:
        return 0.0, np.zeros_like(pred)
    loss = float(np.sum(np.abs(diff) * w) / n)
    grad = np.sign(diff) * w / n
    return loss, grad
