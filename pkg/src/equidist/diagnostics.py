"""Split-R-hat and effective sample size for multi-chain MCMC output.

Both take an array of shape ``(chains, draws)`` for one scalar parameter.
"""
import numpy as np


def _split(draws):
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2:
        raise ValueError("draws must have shape (chains, draws)")
    half = draws.shape[1] // 2
    if half < 2:
        raise ValueError("need at least 4 draws per chain")
    return np.concatenate([draws[:, :half], draws[:, -half:]], axis=0)


def split_rhat(draws):
    """Potential scale reduction after splitting each chain in two."""
    x = _split(draws)
    m, n = x.shape
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w == 0.0:
        return 1.0 if b == 0.0 else np.inf
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def _autocov(x):
    """Biased autocovariance of each row via FFT."""
    m, n = x.shape
    xc = x - x.mean(axis=1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size, axis=1)
    acov = np.fft.irfft(f * np.conjugate(f), n=size, axis=1)[:, :n]
    return acov / n


def effective_sample_size(draws):
    """Multi-chain ESS with Geyer's initial monotone sequence estimator."""
    x = _split(draws)
    m, n = x.shape
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    w = chain_var.mean()
    means = x.mean(axis=1)
    var_plus = w * (n - 1.0) / n + means.var(ddof=1)
    if var_plus == 0.0:
        return float(m * n)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first non-positive pair, forced monotone
    total = 0.0
    prev = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0.0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
        t += 2
    tau = max(-1.0 + 2.0 * total, 1.0 / np.log10(m * n))
    return float(m * n / tau)
