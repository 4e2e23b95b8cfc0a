"""Univariate Tree-structured Parzen Estimator search over architecture hyperparameters.

After ``N_STARTUP`` completed trials, history is split at the ``GAMMA`` quantile
of the objective into a good set and a bad set.  Each dimension gets its own
density pair (Gaussian KDE on the transformed coordinate for numeric
dimensions, smoothed counts for categorical ones); ``N_CANDIDATES`` values are
drawn from the good density and the one with the largest good/bad ratio wins.
Numeric densities carry a uniform prior component and a bandwidth floor of
range / min(100, n + 1) so small good sets do not collapse onto one point.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .architectures import HyperParams, NumericError, TrainConfig, train

GAMMA = 0.25
N_STARTUP = 10
N_CANDIDATES = 24
BANDWIDTH_FLOOR = 1e-3
UNIT_CHOICES = (4, 8, 16, 32, 64)


@dataclass(frozen=True)
class Choice:
    values: tuple


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float


@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float


@dataclass
class SearchSpace:
    dims: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, d in self.dims.items():
            if isinstance(d, Choice) and not d.values:
                raise ValueError(f"{name}: empty choice set")
            if isinstance(d, (Uniform, LogUniform)) and not d.low < d.high:
                raise ValueError(f"{name}: bounds out of order")
            if isinstance(d, LogUniform) and d.low <= 0:
                raise ValueError(f"{name}: log-uniform bounds must be positive")

    @classmethod
    def default(cls, conv=False):
        dims = {
            "units_input": Choice(UNIT_CHOICES),
            "units_agg": Choice(UNIT_CHOICES),
            "units_dense": Choice(UNIT_CHOICES),
            "l1": LogUniform(1e-6, 1e-1),
            "l2": LogUniform(1e-6, 1e-1),
            "dropout": Uniform(0.0, 0.5),
        }
        if conv:
            dims["conv_kernel"] = Choice((2, 3))
        return cls(dims)

    def contains(self, params):
        for name, d in self.dims.items():
            x = params[name]
            if isinstance(d, Choice):
                if x not in d.values:
                    return False
            elif not d.low <= x <= d.high:
                return False
        return True


class Status(str, enum.Enum):
    COMPLETE = "complete"
    FAILED = "failed"


@dataclass
class Trial:
    number: int
    params: dict
    objective: float
    seed: int
    status: Status = Status.COMPLETE

    def to_json(self):
        return json.dumps({
            "number": self.number,
            "params": self.params,
            "objective": self.objective if math.isfinite(self.objective) else None,
            "seed": self.seed,
            "status": self.status.value,
        }, sort_keys=True)


# ------------------------------------------------------------------ densities

def _to_internal(d, x):
    return math.log(x) if isinstance(d, LogUniform) else float(x)


def _bounds(d):
    if isinstance(d, LogUniform):
        return math.log(d.low), math.log(d.high)
    return d.low, d.high


def _bandwidth(points, lo, hi):
    """Scott's rule, floored at 1e-3 and at range / min(100, n + 1)."""
    n = len(points)
    sd = float(np.std(points, ddof=1)) if n > 1 else 0.0
    return max(sd * n ** (-1.0 / 5.0), BANDWIDTH_FLOOR, (hi - lo) / min(100, n + 1))


class _NumericKDE:
    """Gaussian mixture truncated to [lo, hi], one component per observation,
    plus one uniform prior component over the bounds."""

    def __init__(self, points, lo, hi):
        self.mu = np.asarray(points, dtype=float)
        self.lo, self.hi = lo, hi
        self.h = _bandwidth(self.mu, lo, hi)
        mass = ndtr((hi - self.mu) / self.h) - ndtr((lo - self.mu) / self.h)
        self.log_mass = np.log(np.maximum(mass, 1e-300))

    def sample(self, rng, size):
        n = len(self.mu)
        k = rng.integers(n + 1, size=size)
        prior = rng.uniform(self.lo, self.hi, size=size)
        if n == 0:
            return prior
        kernel = np.clip(rng.normal(self.mu[np.minimum(k, n - 1)], self.h), self.lo, self.hi)
        return np.where(k == n, prior, kernel)

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x[:, None] - self.mu[None, :]) / self.h
        comp = -0.5 * z * z - math.log(self.h * math.sqrt(2 * math.pi)) - self.log_mass
        prior = np.full((len(x), 1), -math.log(self.hi - self.lo))
        return np.logaddexp.reduce(np.hstack([comp, prior]), axis=1) - math.log(len(self.mu) + 1)


class _CategoricalKDE:
    """Counts plus one pseudo-observation per category."""

    def __init__(self, values, choices):
        counts = np.array([sum(v == c for v in values) for c in choices], dtype=float) + 1.0
        self.p = counts / counts.sum()
        self.choices = choices

    def sample(self, rng, size):
        return rng.choice(len(self.choices), size=size, p=self.p)

    def log_pdf(self, idx):
        return np.log(self.p[np.asarray(idx)])


def sample_uniform(space: SearchSpace, rng):
    out = {}
    for name, d in space.dims.items():
        if isinstance(d, Choice):
            out[name] = d.values[rng.integers(len(d.values))]
        elif isinstance(d, LogUniform):
            out[name] = float(math.exp(rng.uniform(math.log(d.low), math.log(d.high))))
        else:
            out[name] = float(rng.uniform(d.low, d.high))
    return out


def suggest(history, space: SearchSpace, rng):
    """Next hyperparameter dict given past trials."""
    done = [t for t in history if t.status is Status.COMPLETE and math.isfinite(t.objective)]
    if len(done) < N_STARTUP:
        return sample_uniform(space, rng)
    # stable sort keeps tied objectives in submission order
    done = sorted(done, key=lambda t: t.objective)
    n_good = max(1, math.ceil(GAMMA * len(done)))
    good, bad = done[:n_good], done[n_good:]

    out = {}
    for name, d in space.dims.items():
        if isinstance(d, Choice):
            lo_kde = _CategoricalKDE([t.params[name] for t in good], d.values)
            hi_kde = _CategoricalKDE([t.params[name] for t in bad], d.values)
            cand = lo_kde.sample(rng, N_CANDIDATES)
            score = lo_kde.log_pdf(cand) - hi_kde.log_pdf(cand)
            out[name] = d.values[int(cand[int(np.argmax(score))])]
        else:
            lo, hi = _bounds(d)
            lo_kde = _NumericKDE([_to_internal(d, t.params[name]) for t in good], lo, hi)
            hi_kde = _NumericKDE([_to_internal(d, t.params[name]) for t in bad], lo, hi)
            cand = lo_kde.sample(rng, N_CANDIDATES)
            score = lo_kde.log_pdf(cand) - hi_kde.log_pdf(cand)
            best = float(cand[int(np.argmax(score))])
            value = math.exp(best) if isinstance(d, LogUniform) else best
            out[name] = float(min(max(value, d.low), d.high))
    return out


# ---------------------------------------------------------------------- study

def training_objective(kind, train_data, val_data, cfg: TrainConfig = None):
    """Objective callable: best validation BCE of a trained network."""
    cfg = cfg or TrainConfig()

    def objective(params, seed):
        model = train(kind, HyperParams(**params), train_data, val_data,
                      TrainConfig(cfg.batch_size, cfg.max_epochs, seed, cfg.shuffle))
        return float(min(model.history["val_loss"]))

    return objective


def run_study(objective, space: SearchSpace, n_trials, seed=0, log=None):
    """Sequential TPE study.  ``objective(params, seed) -> float``.

    Trial ``i`` trains with seed ``seed + i``.  Returns ``(best, trials)``.
    ``log`` (a writable text handle) receives one JSON line per trial.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(n_trials):
        params = suggest(trials, space, rng)
        trial_seed = seed + i
        try:
            value = float(objective(params, trial_seed))
        except (NumericError, FloatingPointError):
            value = math.inf
        status = Status.COMPLETE if math.isfinite(value) else Status.FAILED
        trial = Trial(i, params, value if status is Status.COMPLETE else math.inf,
                      trial_seed, status)
        trials.append(trial)
        if log is not None:
            log.write(trial.to_json() + "\n")
    complete = [t for t in trials if t.status is Status.COMPLETE]
    if not complete:
        raise NumericError(f"all {n_trials} trials failed")
    return min(complete, key=lambda t: t.objective), trials
