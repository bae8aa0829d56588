"""Independent reference implementations used as test oracles.

Each oracle is written from the defining formula with plain Python loops or
exhaustive enumeration, and shares no code with the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def temi_pair_loss_scalar(qs_x, qt_xp, qt_heads_x, qt_heads_xp, qt_tilde, gamma, floor=1e-12):
    """One ordered pair, one head: -w * log sum_c (qs(c|x) qt(c|x'))^gamma / qt~(c)."""
    H = len(qt_heads_x)
    w = 0.0
    for j in range(H):
        for c in range(len(qt_heads_x[j])):
            w += qt_heads_x[j][c] * qt_heads_xp[j][c]
    w /= H
    inner = 0.0
    for c in range(len(qs_x)):
        inner += (qs_x[c] * qt_xp[c]) ** gamma / max(qt_tilde[c], floor)
    return -w * math.log(max(inner, floor))


def kmeans_global_optimum(x: np.ndarray, C: int) -> float:
    """Minimum within-cluster sum of squares over every labelling into <= C groups."""
    n = x.shape[0]
    best = math.inf
    for labels in itertools.product(range(C), repeat=n):
        total = 0.0
        for c in set(labels):
            pts = x[[i for i in range(n) if labels[i] == c]]
            total += float(((pts - pts.mean(0)) ** 2).sum())
        best = min(best, total)
    return best


def expected_mi_hypergeometric(a_counts, b_counts, n) -> float:
    """E[MI] under the permutation model, summed term by term with math.comb."""
    total = 0.0
    for ai in a_counts:
        for bj in b_counts:
            for nij in range(max(1, ai + bj - n), min(ai, bj) + 1):
                p = math.comb(ai, nij) * math.comb(n - ai, bj - nij) / math.comb(n, bj)
                total += p * nij / n * math.log(n * nij / (ai * bj))
    return total


def mutual_info_counts(u, v) -> float:
    n = len(u)
    mi = 0.0
    for a in set(u):
        for b in set(v):
            nij = sum(1 for i in range(n) if u[i] == a and v[i] == b)
            if nij:
                na = sum(1 for x in u if x == a)
                nb = sum(1 for x in v if x == b)
                mi += nij / n * math.log(n * nij / (na * nb))
    return mi


def entropy_counts(u) -> float:
    n = len(u)
    return -sum(u.count(a) / n * math.log(u.count(a) / n) for a in set(u))


def ami_oracle(u, v) -> float:
    """Adjusted MI with arithmetic-mean normalization, built from the oracles above."""
    u, v = list(u), list(v)
    n = len(u)
    if len(set(u)) == len(set(v)) == 1:
        return 1.0
    emi = expected_mi_hypergeometric([u.count(a) for a in set(u)], [v.count(b) for b in set(v)], n)
    mi = mutual_info_counts(u, v)
    return (mi - emi) / (0.5 * (entropy_counts(u) + entropy_counts(v)) - emi)


def expected_mi_by_permutation(u, v) -> float:
    """E[MI] as the exact average over all relabelings of ``v`` (tiny n only)."""
    perms = list(itertools.permutations(v))
    return sum(mutual_info_counts(list(u), list(p)) for p in perms) / len(perms)


def best_matching_by_enumeration(table: np.ndarray) -> int:
    """Largest one-to-one matched count over all injective row->column maps."""
    C, K = table.shape
    if C <= K:
        return max(sum(table[i, p[i]] for i in range(C)) for p in itertools.permutations(range(K), C))
    return max(sum(table[p[j], j] for j in range(K)) for p in itertools.permutations(range(C), K))


def frechet_1d(mu_a, s_a, mu_b, s_b) -> float:
    return (mu_a - mu_b) ** 2 + (s_a - s_b) ** 2


def auroc_pairs(pos, neg) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties counting one half."""
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def edm_preconditioning(sigma, sigma_data):
    """Literal EDM preconditioning coefficients for a scalar sigma."""
    s2, d2 = sigma * sigma, sigma_data * sigma_data
    return (d2 / (s2 + d2), sigma * sigma_data / math.sqrt(s2 + d2),
            1.0 / math.sqrt(s2 + d2), math.log(sigma) / 4.0)


def gaussian_denoiser(sigma_data):
    """Optimal denoiser for N(0, sigma_data^2 I) data."""
    def D(x, sigma, c=None):
        s = np.asarray(sigma, dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        return np.asarray(x) * sigma_data**2 / (sigma_data**2 + s**2)
    return D


def gaussian_flow_solution(x_start, sigma_start, sigma_end, sigma_data):
    """Exact probability-flow ODE solution for Gaussian data: x scales with sqrt(sd^2 + s^2)."""
    return x_start * math.sqrt((sigma_data**2 + sigma_end**2) / (sigma_data**2 + sigma_start**2))


def central_difference(f, params: dict, h: float = 1e-6) -> dict:
    """Numerical gradient of the scalar ``f()`` w.r.t. every entry of ``params``."""
    out = {}
    for k, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out[k] = g
    return out


def relative_error(analytic: dict, numeric: dict) -> float:
    """Largest per-tensor ``|a - n| / max(|a|, |n|)`` measured in the max norm."""
    worst = 0.0
    for k in numeric:
        a, n = analytic[k], numeric[k]
        scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
        worst = max(worst, float(np.abs(a - n).max() / scale))
    return worst
