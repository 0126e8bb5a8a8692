"""Brute-force references used only by the tests.

Nothing here imports the code paths it checks: gradients come from
central differences, convolution from explicit loops, AUC from all
positive/negative pairs and filter magnitudes from evaluating H(z) directly.
"""

import numpy as np


def fd_gradient(f, x, step=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f(x)
        flat[i] = old - step
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return g


def fd_gradient_smooth(f, x, steps=(1e-4, 1e-5, 1e-6, 1e-7), agree=1e-5):
    """Central differences that step around kinks.

    Each element takes the estimate of the largest step that agrees with the
    next smaller one (relative ``agree``); large steps keep roundoff down,
    small ones dodge ReLU or max-pool switches near the probe point.  Elements
    where no pair agrees are kinks.  Returns ``(gradient, smooth_mask)``.
    """
    est = [fd_gradient(f, x, h) for h in steps]
    grad = est[-1].copy()
    smooth = np.zeros(grad.shape, dtype=bool)
    for coarse, fine in zip(est, est[1:]):
        scale = np.maximum(np.maximum(np.abs(coarse), np.abs(fine)), 1e-3)
        ok = ~smooth & (np.abs(coarse - fine) <= agree * scale + 1e-9)
        grad[ok] = coarse[ok]
        smooth |= ok
    return grad, smooth


def conv1d_naive(x, k, bias=None, stride=1, padding=0):
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    n, c_in, w = x.shape
    c_out, _, ksize = k.shape
    xp = np.zeros((n, c_in, w + 2 * padding))
    xp[:, :, padding:padding + w] = x
    w_out = (w + 2 * padding - ksize) // stride + 1
    out = np.zeros((n, c_out, w_out))
    for b in range(n):
        for o in range(c_out):
            for t in range(w_out):
                acc = 0.0 if bias is None else float(bias[o])
                for c in range(c_in):
                    for j in range(ksize):
                        acc += xp[b, c, t * stride + j] * k[o, c, j]
                out[b, o, t] = acc
    return out


def auc_pairwise(scores, labels):
    """Mann-Whitney statistic over all positive/negative pairs, ties count half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    wins = 0.0
    for p in pos:
        wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return wins / (len(pos) * len(neg))


def freq_response(sos, f_hz, fs):
    """|H(e^{j 2 pi f / fs})| for a cascade of (b0, b1, b2, a0, a1, a2) rows."""
    z = np.exp(1j * 2 * np.pi * np.asarray(f_hz, dtype=np.float64) / fs)
    h = np.ones_like(z)
    for b0, b1, b2, a0, a1, a2 in np.asarray(sos):
        h = h * (b0 + b1 / z + b2 / z ** 2) / (a0 + a1 / z + a2 / z ** 2)
    return np.abs(h)
