"""Split-chain potential scale reduction and effective sample size."""

from __future__ import annotations

import math

import numpy as np

from ..errors import InsufficientDraws

MIN_KEEP = 10


def _check(x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected a (draws, chains) matrix")
    n, m = x.shape
    if m < 2 or n < MIN_KEEP:
        raise InsufficientDraws(f"need >= 2 chains and >= {MIN_KEEP} draws per chain, got {m} x {n}")
    return x


def _split(x):
    n = x.shape[0] // 2
    return np.concatenate([x[:n], x[x.shape[0] - n :]], axis=1)


def split_rhat(x) -> float:
    x = _split(_check(x))
    n = x.shape[0]
    means = x.mean(axis=0)
    W = x.var(axis=0, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else math.inf
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def _autocov(x):
    n = len(x)
    f = np.fft.rfft(x - x.mean(), n=2 * n)
    acov = np.fft.irfft(f * np.conjugate(f))[:n]
    return acov / n


def ess(x) -> float:
    """Multi-chain effective sample size with Geyer's initial monotone sequence."""
    x = _check(x)
    n, m = x.shape
    acov = np.stack([_autocov(x[:, j]) for j in range(m)], axis=1)
    chain_var = acov[0] * n / (n - 1)
    W = chain_var.mean()
    B_over_n = x.mean(axis=0).var(ddof=1)
    var_plus = (n - 1) / n * W + B_over_n
    if var_plus == 0:
        return float(n * m)
    rho = 1.0 - (W - acov.mean(axis=1)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first negative and forced monotone
    total = 0.0
    prev = math.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
        t += 2
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / math.log10(n * m))
    return float(n * m / tau)


def mcse(x) -> float:
    """Monte Carlo standard error of the mean of a (draws, chains) matrix."""
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / math.sqrt(ess(x)))


def diagnostics(draws) -> dict[str, tuple[float, float]]:
    """``{parameter: (rhat, ess)}`` for every scalar in a draw collection."""
    out = {}
    for name, mat in draws.matrices().items():
        out[name] = (split_rhat(mat), ess(mat))
    return out
