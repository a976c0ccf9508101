"""Variance schedule and the closed-form diffusion process equations.

The schedule table holds per-timestep constants for the noising chain and
its learned reversal; all operations here are pure functions of the table
and need no network.  Timesteps are 1-based: t runs over 1..T.
"""
from __future__ import annotations

import json

import numpy as np

from .errors import ParameterError

__all__ = [
    "ScheduleTable", "make_linear_schedule", "forward_step",
    "forward_marginal", "posterior_mean", "reverse_step", "predict_x0",
]


class ScheduleTable:
    """Per-timestep diffusion constants.

    Arrays are indexed by t-1 and stored as float32 (the exported precision);
    all arithmetic, including construction of the cumulative products, runs
    in float64.  sigma2[t=1] is defined as 0 (the final reverse step is
    deterministic), which corresponds to taking the cumulative product at
    t=0 to be 1.
    """

    def __init__(self, beta):
        beta64 = np.asarray(beta, dtype=np.float64)
        if beta64.ndim != 1 or beta64.size < 2:
            raise ParameterError("schedule needs at least T=2 beta entries")
        if np.any(beta64 <= 0.0) or np.any(beta64 >= 1.0):
            raise ParameterError("every beta must lie in (0, 1)")
        alpha64 = 1.0 - beta64
        alpha_bar64 = np.cumprod(alpha64)
        alpha_bar_prev64 = np.concatenate([[1.0], alpha_bar64[:-1]])
        sigma2_64 = (1.0 - alpha_bar_prev64) / (1.0 - alpha_bar64) * (1.0 - alpha64)
        self.T = int(beta64.size)
        self.beta = beta64.astype(np.float32)
        self.alpha = alpha64.astype(np.float32)
        self.alpha_bar = alpha_bar64.astype(np.float32)
        self.sigma2 = sigma2_64.astype(np.float32)

    def _check_t(self, t):
        t = int(t)
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside 1..{self.T}")
        return t

    # float64 views of single entries, for op arithmetic
    def alpha_at(self, t):
        return float(self.alpha[self._check_t(t) - 1])

    def alpha_bar_at(self, t):
        return float(self.alpha_bar[self._check_t(t) - 1])

    def beta_at(self, t):
        return float(self.beta[self._check_t(t) - 1])

    def sigma2_at(self, t):
        return float(self.sigma2[self._check_t(t) - 1])

    def to_json(self) -> str:
        return json.dumps({
            "T": self.T,
            "beta": [float(x) for x in self.beta],
            "alpha": [float(x) for x in self.alpha],
            "alpha_bar": [float(x) for x in self.alpha_bar],
            "sigma2": [float(x) for x in self.sigma2],
        })

    @classmethod
    def from_json(cls, text) -> "ScheduleTable":
        d = json.loads(text)
        table = cls.__new__(cls)
        table.T = int(d["T"])
        for name in ("beta", "alpha", "alpha_bar", "sigma2"):
            arr = np.asarray(d[name], dtype=np.float32)
            if arr.size != table.T:
                raise ParameterError(f"schedule JSON field {name} has wrong length")
            setattr(table, name, arr)
        return table


def make_linear_schedule(T, beta_start, beta_end) -> ScheduleTable:
    """Linearly interpolated beta over t = 1..T inclusive."""
    if T < 2:
        raise ParameterError("T must be >= 2")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError("need 0 < beta_start <= beta_end < 1")
    return ScheduleTable(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def forward_step(table: ScheduleTable, x_prev, t, noise):
    """One noising step: sqrt(a_t) x_{t-1} + sqrt(1 - a_t) noise."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x_prev.shape:
        raise ParameterError(f"noise shape {noise.shape} != x shape {x_prev.shape}")
    a = table.alpha_at(t)
    return np.sqrt(a) * x_prev + np.sqrt(1.0 - a) * noise


def forward_marginal(table: ScheduleTable, x0, t, noise):
    """Jump straight from the clean image to timestep t."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ParameterError(f"noise shape {noise.shape} != x shape {x0.shape}")
    ab = table.alpha_bar_at(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def posterior_mean(table: ScheduleTable, x_t, t, eps_hat):
    """Denoised mean: (x_t - beta_t/sqrt(1 - abar_t) eps_hat) / sqrt(a_t)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    a = table.alpha_at(t)
    ab = table.alpha_bar_at(t)
    beta = 1.0 - a
    return (x_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)


def reverse_step(table: ScheduleTable, x_t, t, eps_hat, z):
    """One ancestral sampling step; deterministic at t = 1."""
    mu = posterior_mean(table, x_t, t, eps_hat)
    t = table._check_t(t)
    if t == 1:
        return mu
    return mu + np.sqrt(table.sigma2_at(t)) * np.asarray(z, dtype=np.float64)


def predict_x0(table: ScheduleTable, x_t, t, eps_hat):
    """Invert the marginal: (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    ab = table.alpha_bar_at(t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
