"""Brute-force references used by several test modules."""

import itertools
import math

import numpy as np
from scipy import signal as sps

SR = 16000
N = 1024


def simplex_projection_bruteforce(z):
    """Euclidean projection onto the simplex by enumerating every support.

    For a fixed support S the equality-constrained least squares solution is
    p_S = z_S - (sum(z_S) - 1) / |S|. Among the candidates that are
    nonnegative, the closest to ``z`` is the projection.
    """
    z = np.asarray(z, dtype=np.float64)
    best, best_dist = None, np.inf
    for k in range(1, len(z) + 1):
        for support in itertools.combinations(range(len(z)), k):
            idx = list(support)
            p = np.zeros_like(z)
            p[idx] = z[idx] - (z[idx].sum() - 1) / k
            if np.any(p[idx] < 0):
                continue
            dist = np.sum((p - z) ** 2)
            if dist < best_dist:
                best, best_dist = p, dist
    return best


def capped_projection_bisection(z, cap, iters=200):
    """Projection onto ``{0 <= p <= cap, sum p = 1}`` by bisection on the threshold."""
    z, cap = np.asarray(z, float), np.asarray(cap, float)
    lo, hi = z.min() - cap.max() - 1, z.max()
    for _ in range(iters):
        mid = (lo + hi) / 2
        if np.clip(z - mid, 0, cap).sum() > 1:
            lo = mid
        else:
            hi = mid
    return np.clip(z - (lo + hi) / 2, 0, cap)



def naive_dft(x):
    n = len(x)
    t = np.arange(n)
    return np.array([np.sum(x * np.exp(-2j * np.pi * k * t / n)) for k in range(n)])


def reference_mfcc(windowed, sr=SR, n_filters=26, order=12):
    """MFCCs straight from the definitions, with loops instead of matrices."""
    n = len(windowed)
    spec = np.abs(naive_dft(windowed))[: n // 2 + 1]

    def mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def inv(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    top = mel(sr / 2)
    pts = [inv(top * j / (n_filters + 1)) for j in range(n_filters + 2)]
    energies = []
    for m in range(1, n_filters + 1):
        lo, c, hi = pts[m - 1], pts[m], pts[m + 1]
        e = 0.0
        for k in range(n // 2 + 1):
            f = k * sr / n
            if lo < f <= c:
                w = (f - lo) / (c - lo)
            elif c < f < hi:
                w = (hi - f) / (hi - c)
            else:
                w = 0.0
            e += w * spec[k] ** 2
        energies.append(max(e, 1e-10))
    coeffs = []
    for i in range(1, order + 1):
        s = sum(math.log(energies[m - 1]) * math.cos(math.pi * i / n_filters * (m - 0.5))
                for m in range(1, n_filters + 1))
        coeffs.append(math.sqrt(2.0 / n_filters) * s)
    return np.array(coeffs)


def resonator_noise(freqs, seed, bw=100.0, n=N, sr=SR):
    x = np.random.default_rng(seed).standard_normal(n + 2048)
    for f in freqs:
        r = math.exp(-math.pi * bw / sr)
        x = sps.lfilter([1.0], [1.0, -2 * r * math.cos(2 * math.pi * f / sr), r * r], x)
    return x[2048:] * np.hamming(n)


def periodic(f0, kind, n=N, sr=SR):
    t = np.arange(n) / sr
    if kind == "sine":
        x = np.sin(2 * np.pi * f0 * t)
    else:
        x = 2 * ((f0 * t) % 1.0) - 1
    return x * np.hamming(n)
