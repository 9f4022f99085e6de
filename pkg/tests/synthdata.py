"""Seeded synthetic datasets used across the test suite."""

import numpy as np


def sine_windows(n, L=64, D=2, noise=0.05, seed=0):
    """Random-phase sine/cosine windows in [0, 1] with additive noise."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 4 * np.pi, L)
    out = np.empty((n, L, D))
    for i in range(n):
        phase = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(0.8, 1.2)
        for d in range(D):
            wave = np.sin(freq * t + phase + d * np.pi / 2)
            out[i, :, d] = 0.5 + 0.35 * wave
    out += rng.normal(scale=noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def sine_series(T, D=2, noise=0.05, seed=0):
    """One long sine/cosine series (unnormalized units) for CSV fixtures."""
    rng = np.random.default_rng(seed)
    t = np.arange(T) * 0.2
    cols = []
    for d in range(D):
        wave = 10.0 + 4.0 * np.sin(t + d * np.pi / 2) + rng.normal(scale=noise * 8, size=T)
        cols.append(wave)
    return np.stack(cols, axis=1)


def stock_like_series(T, seed=0):
    """Six OHLCV-style features from a regime-switching geometric random walk.

    Volatility alternates between calm and turbulent regimes so the series
    carries the distribution drift that long windows expose.
    """
    rng = np.random.default_rng(seed)
    log_price = np.empty(T)
    log_price[0] = np.log(100.0)
    vol = 0.01
    for t in range(1, T):
        if rng.random() < 0.01:
            vol = rng.choice([0.005, 0.01, 0.03])
        log_price[t] = log_price[t - 1] + 0.0001 + vol * rng.standard_normal()
    close = np.exp(log_price)
    spread = np.abs(rng.normal(scale=0.01, size=T)) * close
    open_ = close * (1 + rng.normal(scale=0.005, size=T))
    high = np.maximum(open_, close) + spread
    low = np.minimum(open_, close) - spread
    adj = close * rng.uniform(0.98, 1.0)
    volume = np.exp(rng.normal(loc=12.0, scale=0.4, size=T)) * (1 + 5 * np.abs(np.diff(log_price, prepend=log_price[0])))
    return np.stack([open_, high, low, close, adj, volume], axis=1)


def write_series_csv(path, values, names):
    lines = [",".join(names)]
    for row in values:
        lines.append(",".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path
