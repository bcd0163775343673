"""Run counters and the flop/memory energy model.

Energy is ``pw_flop * T_flop + pw_mem * T_mem``.  A model call pays one memory
term (weights streamed once per call) and one flop term per input position in
the batch.  Small-model calls are charged ``small_ratio`` of a large call.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from importlib import resources
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .errors import DegenerateFit


@dataclass
class RunStats:
    """Counters accumulated by one decode run."""

    large_model_calls: int = 0
    small_model_calls: int = 0
    tokens_emitted: int = 0
    iterations: int = 0
    accepted_lengths: list[int] = field(default_factory=list)
    large_input_units: int = 0
    small_input_units: int = 0
    truncated_tokens: int = 0

    def record(self, accepted_len: int, emitted: int, *, large_calls: int = 1,
               small_calls: int = 0, large_units: int = 1, small_units: int = 0) -> None:
        self.iterations += 1
        self.accepted_lengths.append(int(accepted_len))
        self.tokens_emitted += int(emitted)
        self.large_model_calls += int(large_calls)
        self.small_model_calls += int(small_calls)
        self.large_input_units += int(large_units)
        self.small_input_units += int(small_units)

    def truncate(self, n: int) -> None:
        self.tokens_emitted -= n
        self.truncated_tokens += n

    @property
    def mean_accepted_length(self) -> float:
        if not self.accepted_lengths:
            return 0.0
        return float(np.mean(self.accepted_lengths))

    def modeled_time(self, params: "CostParams") -> float:
        return time_estimate(self, params)

    def __add__(self, other: "RunStats") -> "RunStats":
        if not isinstance(other, RunStats):
            return NotImplemented
        out = RunStats()
        for f in fields(self):
            setattr(out, f.name, getattr(self, f.name) + getattr(other, f.name))
        return out

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class CostParams:
    """Power and per-call time constants of the modeled accelerator.

    ``t_flop`` is seconds per input position of a large-model call and
    ``t_mem`` seconds of weight streaming per large-model call.
    """

    pw_flop: float = 20.0
    pw_mem: float = 40.0
    t_flop: float = 0.005
    t_mem: float = 0.35
    small_ratio: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{f.name} must be a positive number, got {v!r}")
        if not self.pw_mem > self.pw_flop:
            raise ValueError("memory power must exceed flop power (pw_mem > pw_flop)")

    @classmethod
    def from_dict(cls, data: dict | None) -> "CostParams":
        if not data:
            return cls()
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown cost fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _times(stats: RunStats, params: CostParams) -> tuple[float, float]:
    rho = params.small_ratio
    t_flop = params.t_flop * (stats.large_input_units + rho * stats.small_input_units)
    t_mem = params.t_mem * (stats.large_model_calls + rho * stats.small_model_calls)
    return t_flop, t_mem


def energy_estimate(stats: RunStats, params: CostParams) -> float:
    """Modeled joules for the run described by ``stats``."""
    t_flop, t_mem = _times(stats, params)
    return params.pw_flop * t_flop + params.pw_mem * t_mem


def time_estimate(stats: RunStats, params: CostParams) -> float:
    t_flop, t_mem = _times(stats, params)
    return t_flop + t_mem


@dataclass(frozen=True)
class Comparison:
    time_per_token_a: float
    time_per_token_b: float
    energy_per_token_a: float
    energy_per_token_b: float
    mean_accepted_a: float
    mean_accepted_b: float
    tokens_per_iteration_a: float
    tokens_per_iteration_b: float

    @property
    def speedup(self) -> float:
        """How many times faster per token run B is than run A."""
        return self.time_per_token_a / self.time_per_token_b

    @property
    def energy_ratio(self) -> float:
        """How many times less energy per token run B uses than run A."""
        return self.energy_per_token_a / self.energy_per_token_b

    @property
    def tokens_per_iteration_ratio(self) -> float:
        return self.tokens_per_iteration_b / self.tokens_per_iteration_a

    def as_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out.update(speedup=self.speedup, energy_ratio=self.energy_ratio,
                   tokens_per_iteration_ratio=self.tokens_per_iteration_ratio)
        return out


def speedup_report(stats_a: RunStats, stats_b: RunStats, params: CostParams) -> Comparison:
    for s in (stats_a, stats_b):
        if s.tokens_emitted < 1 or s.iterations < 1:
            raise ValueError("both runs must emit at least one token")
    return Comparison(
        time_per_token_a=time_estimate(stats_a, params) / stats_a.tokens_emitted,
        time_per_token_b=time_estimate(stats_b, params) / stats_b.tokens_emitted,
        energy_per_token_a=energy_estimate(stats_a, params) / stats_a.tokens_emitted,
        energy_per_token_b=energy_estimate(stats_b, params) / stats_b.tokens_emitted,
        mean_accepted_a=stats_a.mean_accepted_length,
        mean_accepted_b=stats_b.mean_accepted_length,
        tokens_per_iteration_a=stats_a.tokens_emitted / stats_a.iterations,
        tokens_per_iteration_b=stats_b.tokens_emitted / stats_b.iterations,
    )


def break_even_tokens_per_iteration(spec: RunStats, greedy: RunStats,
                                    params: CostParams) -> float:
    """Tokens per iteration a speculative run needs to match greedy's J/token.

    Uses the run's own mean energy per iteration, so the comparison
    ``tokens/iteration > break_even`` is equivalent to the speculative run
    having the lower modeled energy per token.
    """
    per_iter = energy_estimate(spec, params) / spec.iterations
    per_token_greedy = energy_estimate(greedy, params) / greedy.tokens_emitted
    return per_iter / per_token_greedy


# calibration ----------------------------------------------------------------


class CostCalibration(RegressorMixin, BaseEstimator):
    """Least-squares line ``energy_per_run = intercept + slope * batch_size``.

    The intercept is the per-run energy that does not scale with batch size
    (memory traffic), the slope the per-input (flop) energy.
    """

    def fit(self, X, y):
        b = np.asarray(X, dtype=float).reshape(-1)
        e = np.asarray(y, dtype=float).reshape(-1)
        if b.size != e.size:
            raise ValueError("X and y have different lengths")
        if b.size < 2:
            raise DegenerateFit("need at least two calibration rows")
        if np.all(b == b[0]):
            raise DegenerateFit("all batch sizes are equal; slope is not identifiable")
        design = np.column_stack([np.ones_like(b), b])
        coef, *_ = np.linalg.lstsq(design, e, rcond=None)
        self.intercept_, self.slope_ = float(coef[0]), float(coef[1])
        self.residuals_ = e - design @ coef
        return self

    def predict(self, X):
        check_is_fitted(self, "slope_")
        return self.intercept_ + self.slope_ * np.asarray(X, dtype=float).reshape(-1)


@dataclass(frozen=True)
class CalibrationFit:
    intercept: float
    slope: float
    residuals: tuple[float, ...]

    @property
    def memory_dominance(self) -> float:
        """Intercept over the batch-1 flop contribution."""
        return self.intercept / self.slope


def fit_cost_params(rows: Iterable[Sequence[float]]) -> CalibrationFit:
    """Fit ``(batch_size, energy_per_run)`` rows; see :class:`CostCalibration`."""
    rows = [tuple(r) for r in rows]
    if len(rows) < 2:
        raise DegenerateFit("need at least two calibration rows")
    X = [r[0] for r in rows]
    y = [r[1] for r in rows]
    model = CostCalibration().fit(X, y)
    return CalibrationFit(model.intercept_, model.slope_,
                          tuple(float(r) for r in model.residuals_))


def load_batch_energy() -> list[tuple[int, float]]:
    """Batch size vs measured energy per run (shipped fixture)."""
    text = resources.files("speclab.data").joinpath("batch_energy.csv").read_text()
    reader = csv.DictReader(text.splitlines())
    return [(int(r["batch_size"]), float(r["energy_per_run_j"])) for r in reader]
