"""Replacement schedules and the three gate mechanisms.

A schedule maps the training fraction t in [0, 1] to a value in [0, 1] by
piecewise-linear interpolation between breakpoints. For DCR the value is the
teacher weight alpha; for the Theseus variants it is the probability p of
selecting the student.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ParameterError


@dataclass(frozen=True)
class GateSchedule:
    kind: str
    breakpoints: tuple

    def __post_init__(self):
        pts = tuple((float(t), float(v)) for t, v in self.breakpoints)
        if len(pts) < 2:
            raise ParameterError("a schedule needs at least two breakpoints")
        ts = [t for t, _ in pts]
        if ts[0] != 0.0 or ts[-1] != 1.0 or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ParameterError(f"breakpoint fractions must increase strictly from 0 to 1: {ts}")
        if any(not 0.0 <= v <= 1.0 for _, v in pts):
            raise ParameterError(f"schedule values must lie in [0, 1]: {pts}")
        object.__setattr__(self, "breakpoints", pts)

    def __call__(self, t_fraction: float) -> float:
        return schedule_value(self, t_fraction)

    @property
    def name(self) -> str:
        if self.kind in ("dcr_aggr20", "theseus_aggr20"):
            return self.kind
        if self.kind == "constant":
            return f"constant:{self.breakpoints[0][1]:g}"
        if self.kind == "linear":
            (_, a), (f, b) = self.breakpoints[0], self.breakpoints[1]
            return f"linear:{a:g}:{b:g}:{f:g}"
        return self.kind


def dcr_aggr20() -> GateSchedule:
    return GateSchedule("dcr_aggr20", ((0.0, 1.0), (0.10, 0.3), (0.20, 0.0), (1.0, 0.0)))


def theseus_aggr20() -> GateSchedule:
    return GateSchedule("theseus_aggr20", ((0.0, 0.1), (0.10, 0.7), (0.20, 1.0), (1.0, 1.0)))


def constant(c: float) -> GateSchedule:
    return GateSchedule("constant", ((0.0, c), (1.0, c)))


def linear(start: float, end: float, over: float) -> GateSchedule:
    """Ramp from ``start`` to ``end`` over the first ``over`` fraction, then hold."""
    if not 0.0 < over <= 1.0:
        raise ParameterError(f"ramp fraction must be in (0, 1], got {over}")
    if over == 1.0:
        return GateSchedule("linear", ((0.0, start), (1.0, end)))
    return GateSchedule("linear", ((0.0, start), (over, end), (1.0, end)))


def parse_schedule(text: str) -> GateSchedule:
    """Build a schedule from ``dcr_aggr20``, ``theseus_aggr20``, ``constant:c`` or ``linear:a:b:f``."""
    parts = text.strip().split(":")
    try:
        if parts == ["dcr_aggr20"]:
            return dcr_aggr20()
        if parts == ["theseus_aggr20"]:
            return theseus_aggr20()
        if parts[0] == "constant" and len(parts) == 2:
            return constant(float(parts[1]))
        if parts[0] == "linear" and len(parts) == 4:
            return linear(float(parts[1]), float(parts[2]), float(parts[3]))
    except (ValueError, ParameterError) as exc:
        raise ConfigError(f"bad schedule {text!r}: {exc}", key="schedule") from exc
    raise ConfigError(f"unknown schedule {text!r}", key="schedule")


def schedule_value(s: GateSchedule, t_fraction: float) -> float:
    t = float(t_fraction)
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"t_fraction must be in [0, 1], got {t_fraction}")
    pts = s.breakpoints
    for (t0, v0), (t1, v1) in zip(pts, pts[1:]):
        if t == t0:
            return v0
        if t == t1:
            return v1
        if t0 < t < t1:
            return v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    raise AssertionError("unreachable: breakpoints cover [0, 1]")


@dataclass(frozen=True)
class GateDraw:
    mechanism: str  # deterministic | bernoulli | gumbel
    value: object  # float, or an array of per-example values
    temperature: Optional[float] = None
    schedule_value: Optional[float] = None


def draw_bernoulli_gates(p: float, rng: np.random.Generator, size=None):
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"p must be in [0, 1], got {p}")
    return np.asarray(rng.random(size) < p, dtype=np.float64)


def draw_bernoulli_gate(p: float, rng: np.random.Generator) -> int:
    return int(draw_bernoulli_gates(p, rng))


_TINY = np.nextafter(0.0, 1.0)
_BELOW_ONE = np.nextafter(1.0, 0.0)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def draw_gumbel_gates(p: float, tau: float, rng: np.random.Generator, size=None, noise=None):
    """Binary-concrete draws ``sigmoid((logit(p) + g) / tau)``, g standard logistic.

    ``noise`` lets callers reuse a fixed logistic sample across temperatures.
    Results are clamped into the open interval (0, 1).
    """
    if not 0.0 < p < 1.0:
        raise ParameterError(f"gumbel gate needs p in (0, 1), got {p}")
    if not tau > 0.0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if noise is None:
        u = rng.random(size)
        u = np.where(u == 0.0, _TINY, u)
        noise = np.log(u) - np.log1p(-u)
    r = _sigmoid((math.log(p / (1.0 - p)) + noise) / tau)
    return np.clip(r, _TINY, _BELOW_ONE)


def draw_gumbel_gate(p: float, tau: float, rng: np.random.Generator) -> float:
    return float(draw_gumbel_gates(p, tau, rng))


MECHANISMS = {
    "dcr": "deterministic",
    "dcr_dfg": "deterministic",
    "student_only": "deterministic",
    "kd": "deterministic",
    "theseus": "bernoulli",
    "theseus_gumbel": "gumbel",
    "theseus_gumbel_dfg": "gumbel",
}


def gate_for_step(method, step: int, total_steps: int, layers, rng: np.random.Generator,
                  batch_size: Optional[int] = None) -> dict:
    """Gate draws for every replaced layer at ``step``.

    Deterministic methods share one schedule value across layers. Stochastic
    methods draw independently per layer (and per example when
    ``method.per_example_gates`` is set), before the batch is seen.
    """
    if not 0 <= step <= total_steps or total_steps < 1:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    return draw_gates(method, step / total_steps, layers, rng, batch_size)


def draw_gates(method, t: float, layers, rng: np.random.Generator, batch_size: Optional[int] = None) -> dict:
    kind = method.kind
    mech = MECHANISMS[kind]
    if kind in ("student_only", "kd"):
        return {}
    v = schedule_value(method.schedule, t)
    if mech == "deterministic":
        return {l: GateDraw("deterministic", v, schedule_value=v) for l in layers}
    size = batch_size if getattr(method, "per_example_gates", False) else None
    draws = {}
    for l in layers:
        if mech == "gumbel" and v in (0.0, 1.0):
            # no logit at the endpoints; the soft gate degenerates to a constant
            draws[l] = GateDraw("deterministic", v if size is None else np.full(size, v), schedule_value=v)
            continue
        if mech == "bernoulli":
            val = draw_bernoulli_gates(v, rng, size)
        else:
            val = draw_gumbel_gates(v, method.tau, rng, size)
        draws[l] = GateDraw(mech, float(val) if size is None else val,
                            method.tau if mech == "gumbel" else None, v)
    return draws
