"""Slow, independent reference implementations used by the tests."""

import math

import numpy as np


def das_triple_loop(samples, geometry):
    """Delay-and-sum written pixel by pixel and element by element."""
    n_t, n_e = samples.shape
    c = geometry.speed_of_sound
    fs = geometry.sample_rate
    pitch = geometry.element_pitch
    out = np.zeros((n_t, n_e))
    for i in range(n_t):
        z = geometry.axial_offset + i * c / fs
        for j in range(n_e):
            acc = 0.0
            for e in range(n_e):
                dx = (e - j) * pitch
                d = math.sqrt(dx * dx + z * z)
                k = math.floor((d - geometry.axial_offset) / c * fs + 0.5)
                if 0 <= k < n_t:
                    acc += samples[k, e]
            out[i, j] = acc
    return out


def adam_trace(w0, lr, beta1, beta2, eps, steps):
    """Adam on f(w) = w^2, scalar arithmetic only."""
    w, m, v = w0, 0.0, 0.0
    out = []
    for t in range(1, steps + 1):
        g = 2.0 * w
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1**t)
        vh = v / (1 - beta2**t)
        w = w - lr * mh / (math.sqrt(vh) + eps)
        out.append(w)
    return out


def ssim_scalar(a, b, c1=0.01, c2=0.03):
    """Global SSIM from plain Python sums."""
    xs = [float(x) for x in np.ravel(a)]
    ys = [float(y) for y in np.ravel(b)]
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    vx = sum((x - mx) ** 2 for x in xs) / (n - 1)
    vy = sum((y - my) ** 2 for y in ys) / (n - 1)
    cxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / (n - 1)
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
