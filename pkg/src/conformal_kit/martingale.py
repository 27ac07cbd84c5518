"""Conformal test martingales for online exchangeability monitoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .calibrate import smoothed_p_value
from .core import as_generator

__all__ = [
    "EPS_GRID_SIZE",
    "power_step",
    "mixture_wealth",
    "mixture_log_wealth",
    "mixture_log_wealth_path",
    "power_log_wealth_path",
    "online_p_values",
    "MartingaleState",
    "MonitorEvent",
    "monitor",
]

EPS_GRID_SIZE = 1001


def _check_p(p):
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0) or np.any(p > 1) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in (0, 1]")
    return p


def _check_eps(eps: float) -> float:
    eps = float(eps)
    if not 0 < eps <= 1:
        raise ValueError(f"betting parameter must lie in (0, 1], got {eps}")
    return eps


def power_step(wealth: float, p: float, epsilon: float) -> float:
    """One update of the power martingale: ``wealth * eps * p**(eps - 1)``."""
    p = float(_check_p(p))
    eps = _check_eps(epsilon)
    return float(wealth) * eps * p ** (eps - 1.0)


def _simpson_weights(m: int) -> np.ndarray:
    if m % 2 == 0:
        raise ValueError("Simpson grid needs an odd number of points")
    w = np.ones(m)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / (3.0 * (m - 1))


def _log_integral(n, log_sum, grid_size: int):
    """``log int_0^1 eps^n exp((eps - 1) log_sum) d eps`` for arrays of
    (n, log_sum) pairs, by Simpson's rule in log space."""
    eps = np.linspace(0.0, 1.0, grid_size)
    w = _simpson_weights(grid_size)
    n = np.atleast_1d(np.asarray(n, dtype=float))
    log_sum = np.atleast_1d(np.asarray(log_sum, dtype=float))
    with np.errstate(divide="ignore"):
        log_eps = np.log(eps)
    # n * log(0) is -inf for n > 0 and 0 for n = 0
    term = np.where(n[:, None] > 0, n[:, None] * log_eps[None, :], 0.0)
    L = term + (eps[None, :] - 1.0) * log_sum[:, None]
    top = L.max(axis=1, keepdims=True)
    return top[:, 0] + np.log(np.exp(L - top) @ w)


def mixture_log_wealth(p_history, grid_size: int = EPS_GRID_SIZE) -> float:
    p = _check_p(np.asarray(p_history, dtype=float).ravel())
    if p.size == 0:
        return 0.0
    return float(_log_integral(p.size, np.log(p).sum(), grid_size)[0])


def mixture_wealth(p_history, grid_size: int = EPS_GRID_SIZE) -> float:
    """Uniform mixture over ``eps`` of power martingales, ``int_0^1 prod eps p_i^(eps-1)``.

    An empty history gives 1.
    """
    return math.exp(mixture_log_wealth(p_history, grid_size))


def mixture_log_wealth_path(p_history, grid_size: int = EPS_GRID_SIZE) -> np.ndarray:
    """Log wealth of the mixture martingale after each step."""
    p = _check_p(np.asarray(p_history, dtype=float).ravel())
    if p.size == 0:
        return np.zeros(0)
    steps = np.arange(1, p.size + 1)
    out = np.empty(p.size)
    cum = np.cumsum(np.log(p))
    chunk = 2048
    for start in range(0, p.size, chunk):
        sl = slice(start, start + chunk)
        out[sl] = _log_integral(steps[sl], cum[sl], grid_size)
    return out


def power_log_wealth_path(p_history, epsilon: float) -> np.ndarray:
    p = _check_p(np.asarray(p_history, dtype=float).ravel())
    eps = _check_eps(epsilon)
    return np.cumsum(math.log(eps) + (eps - 1.0) * np.log(p))


def online_p_values(scores, rng=None, initial=()) -> np.ndarray:
    """Smoothed p-value of every stream score against all earlier ones.

    ``initial`` scores (an optional starting calibration set) precede the
    stream. Under exchangeability these p-values are i.i.d. uniform.
    """
    s = np.asarray(scores, dtype=float).ravel()
    init = np.asarray(initial, dtype=float).ravel()
    tau = as_generator(rng).random(s.size)
    m = init.size
    out = np.empty(s.size)
    if m:
        init_gt = np.sum(init[None, :] > s[:, None], axis=1)
        init_eq = np.sum(init[None, :] == s[:, None], axis=1)
    else:
        init_gt = init_eq = np.zeros(s.size, dtype=int)
    block = 1024
    for start in range(0, s.size, block):
        stop = min(start + block, s.size)
        rows = s[start:stop]
        prev = s[:stop]
        # earlier entries only: strictly lower triangle of the (rows, prev) grid
        earlier = np.arange(stop)[None, :] < np.arange(start, stop)[:, None]
        gt = np.sum((prev[None, :] > rows[:, None]) & earlier, axis=1) + init_gt[start:stop]
        eq = np.sum((prev[None, :] == rows[:, None]) & earlier, axis=1) + init_eq[start:stop]
        n_prev = np.arange(start, stop) + m
        out[start:stop] = (gt + tau[start:stop] * (eq + 1)) / (n_prev + 1)
    return out


@dataclass(frozen=True)
class MartingaleState:
    """Running state of a test martingale; wealth is kept as a logarithm.

    ``betting`` is ``"power"`` (with ``epsilon``) or ``"mixture"``.
    """

    betting: str = "mixture"
    epsilon: float = 0.5
    threshold: float = 20.0
    log_wealth: float = 0.0
    history_len: int = 0
    log_p_sum: float = 0.0
    alerted: bool = False

    def __post_init__(self):
        if self.betting not in ("power", "mixture"):
            raise ValueError(f"unknown betting scheme {self.betting!r}")
        if self.betting == "power":
            _check_eps(self.epsilon)
        if not self.threshold > 0:
            raise ValueError("alert threshold must be positive")
        if self.history_len == 0 and self.log_wealth >= math.log(self.threshold):
            object.__setattr__(self, "alerted", True)

    @property
    def wealth(self) -> float:
        return math.exp(self.log_wealth) if self.log_wealth < 700 else math.inf

    def update(self, p: float) -> "MartingaleState":
        p = float(_check_p(p))
        n = self.history_len + 1
        log_p_sum = self.log_p_sum + math.log(p)
        if self.betting == "power":
            log_w = self.log_wealth + math.log(self.epsilon) + (self.epsilon - 1.0) * math.log(p)
        else:
            log_w = float(_log_integral(n, log_p_sum, EPS_GRID_SIZE)[0])
        alerted = self.alerted or log_w >= math.log(self.threshold)
        return replace(self, log_wealth=log_w, history_len=n, log_p_sum=log_p_sum, alerted=alerted)


@dataclass(frozen=True)
class MonitorEvent:
    index: int
    p_value: float
    wealth: float
    alert: bool


def monitor(scores, cal_scores, state: MartingaleState | None = None, rng=None,
            online: bool = False) -> tuple[list[MonitorEvent], MartingaleState]:
    """Feed a stream of test scores through a test martingale.

    Each score gets a smoothed p-value against ``cal_scores`` (fixed), or,
    with ``online=True``, against the calibration scores plus every earlier
    stream score. The alert flag latches once wealth reaches the threshold.
    """
    cal = np.asarray(cal_scores, dtype=float).ravel()
    s = np.asarray(scores, dtype=float).ravel()
    if cal.size == 0 and not online:
        raise ValueError("empty calibration set")
    state = MartingaleState() if state is None else state
    gen = as_generator(rng)
    if online:
        ps = online_p_values(s, gen, cal)
    else:
        ps = np.atleast_1d(smoothed_p_value(cal, s, gen)) if s.size else np.zeros(0)
    events = []
    for i, p in enumerate(ps, start=1):
        state = state.update(p)
        events.append(MonitorEvent(i, float(p), state.wealth, state.alerted))
    return events, state
