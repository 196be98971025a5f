"""Shared oracles for the test-suite."""

import numpy as np
import torch


def directional_fd_error(loss_fn, params, rng, eps=1e-6):
    """Relative error between the analytic directional derivative and a central difference.

    ``loss_fn()`` must be a deterministic float64 scalar function of ``params``.
    A random unit direction is drawn over the whole group.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    dirs = [torch.from_numpy(rng.standard_normal(tuple(p.shape))).to(p.dtype) for p in params]
    norm = torch.sqrt(sum((d**2).sum() for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = float(sum((g * d).sum() for g, d in zip(grads, dirs) if g is not None))
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(eps * d)
        up = float(loss_fn())
        for p, d in zip(params, dirs):
            p.sub_(2 * eps * d)
        down = float(loss_fn())
        for p, d in zip(params, dirs):
            p.add_(eps * d)
    numeric = (up - down) / (2 * eps)
    scale = max(abs(analytic), abs(numeric), 1e-8)
    return abs(analytic - numeric) / scale


def scalar_gru_forward(params, seq):
    """Pure-Python float64 GRU recurrence, mean pooling of the top layer, sigmoid readout.

    ``params``: list of per-layer dicts with numpy arrays W [D,3H], Uzr [H,2H],
    Uc [H,H], b [3H]; plus ``readout`` (w [H], b scalar) as the last entry.
    Gate order within the 3H blocks: update z, reset r, candidate.
    """
    import math

    xs = [list(map(float, row)) for row in seq]
    layers, (wr, br) = params[:-1], params[-1]
    for layer in layers:
        W, Uzr, Uc, b = layer["W"], layer["Uzr"], layer["Uc"], layer["b"]
        H = Uc.shape[0]
        h = [0.0] * H
        out = []
        for x in xs:
            a = [b[k] + sum(x[i] * W[i, k] for i in range(len(x))) for k in range(3 * H)]
            zr = [sum(h[i] * Uzr[i, k] for i in range(H)) for k in range(2 * H)]
            z = [1 / (1 + math.exp(-(a[k] + zr[k]))) for k in range(H)]
            r = [1 / (1 + math.exp(-(a[H + k] + zr[H + k]))) for k in range(H)]
            rh = [r[i] * h[i] for i in range(H)]
            c = [math.tanh(a[2 * H + k] + sum(rh[i] * Uc[i, k] for i in range(H))) for k in range(H)]
            h = [(1 - z[k]) * h[k] + z[k] * c[k] for k in range(H)]
            out.append(h)
        xs = out
    pooled = [sum(col) / len(xs) for col in zip(*xs)]
    logit = sum(p * w for p, w in zip(pooled, wr)) + br
    return 1 / (1 + math.exp(-logit))
