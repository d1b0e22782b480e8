"""Finite-difference checks shared by the unit and acceptance suites."""

import numpy as np

from curricast.nn import (dense_backward, dense_forward, dilated_conv1d_backward, dilated_conv1d_forward,
                          lstm_cell_backward, lstm_cell_forward)
from oracles import central_difference

H_STEP = 1e-5


def norm_rel_error(analytic, numeric):
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def check_dense(seed):
    rng = np.random.default_rng(seed)
    B, I, O = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 6)
    x, W, b = rng.normal(size=(B, I)), rng.normal(size=(I, O)), rng.normal(size=O)
    R = rng.normal(size=(B, O))

    def f():
        return float(np.sum(dense_forward(x, W, b)[0] * R))

    _, cache = dense_forward(x, W, b)
    dx, dW, db = dense_backward(R, W, cache)
    return max(norm_rel_error(dx, central_difference(f, x, H_STEP)),
               norm_rel_error(dW, central_difference(f, W, H_STEP)),
               norm_rel_error(db, central_difference(f, b, H_STEP)))


def check_lstm_cell(seed):
    rng = np.random.default_rng(seed)
    B, I, H = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
    p = {"Wx": rng.normal(scale=0.7, size=(I, 4 * H)), "Wh": rng.normal(scale=0.7, size=(H, 4 * H)),
         "b": rng.normal(scale=0.5, size=4 * H)}
    x, h0, c0 = rng.normal(size=(B, I)), rng.normal(size=(B, H)), rng.normal(size=(B, H))
    Rh, Rc = rng.normal(size=(B, H)), rng.normal(size=(B, H))

    def f():
        h, c, _ = lstm_cell_forward(x, h0, c0, p)
        return float(np.sum(h * Rh) + np.sum(c * Rc))

    _, _, cache = lstm_cell_forward(x, h0, c0, p)
    dx, dh, dc, g = lstm_cell_backward(Rh, Rc, cache, p)
    errs = [norm_rel_error(dx, central_difference(f, x, H_STEP)),
            norm_rel_error(dh, central_difference(f, h0, H_STEP)),
            norm_rel_error(dc, central_difference(f, c0, H_STEP))]
    errs += [norm_rel_error(g[k], central_difference(f, p[k], H_STEP)) for k in p]
    return max(errs)


def check_conv(seed):
    rng = np.random.default_rng(seed)
    B, C, O = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    T, d = rng.integers(2, 12), int(rng.choice([1, 2, 4, 8]))
    p = {"W": rng.normal(size=(O, C, 2)), "b": rng.normal(size=O)}
    x = rng.normal(size=(B, C, T))
    pad = rng.normal(size=C)
    R = rng.normal(size=(B, O, T))

    def f():
        return float(np.sum(dilated_conv1d_forward(x, p, d, pad=pad)[0] * R))

    _, cache = dilated_conv1d_forward(x, p, d, pad=pad)
    dx, dpad, g = dilated_conv1d_backward(R, cache, p)
    return max(norm_rel_error(dx, central_difference(f, x, H_STEP)),
               norm_rel_error(dpad, central_difference(f, pad, H_STEP)),
               norm_rel_error(g["W"], central_difference(f, p["W"], H_STEP)),
               norm_rel_error(g["b"], central_difference(f, p["b"], H_STEP)))
