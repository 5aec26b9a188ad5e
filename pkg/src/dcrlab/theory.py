"""Closed forms and Monte-Carlo checks for gated residual replacement.

Five checks, each producing a ``CheckRecord``:

    hard_gate      Var[z a] = p Var[a] + p(1-p) |E a|^2 for a Bernoulli gate z
    soft_gate      Var[r a] = m_r^2 Var[a] + Var(r) E|a|^2 for a soft gate r
    gate_variance  gate-induced gradient variance on the live model: 0 for the
                   deterministic blend, p(1-p) E|a(S;X)|^2 for the hard gate
    curvature      |E psi(Y) - psi(mu)| <= (M/2) p(1-p) |Delta|^2
    path_bound     |f(y(a)) - f(y(0))| <= L_y a |S - T| along the blend path

Variances of vectors are traces of the covariance (sum over coordinates).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .data import make_synthetic_task
from .engine import flat_grad
from .errors import ParameterError, ProbeError
from .gates import draw_bernoulli_gates, draw_gumbel_gates
from .harness import run_experiment
from .model import MicroTransformer, model_forward

FP_SLACK = 1e-12


# -- closed forms ---------------------------------------------------------------


def theseus_variance_closed_form(p: float, mean_a, var_a: float) -> float:
    """p Var[a] + p(1-p) |E a|^2."""
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"p must be in [0, 1], got {p}")
    if var_a < 0:
        raise ParameterError(f"var_a must be >= 0, got {var_a}")
    m = np.asarray(mean_a, dtype=np.float64)
    return float(p * var_a + p * (1.0 - p) * np.dot(m.ravel(), m.ravel()))


def soft_gate_variance_closed_form(p: float, var_r: float, mean_sq_a: float, var_a: float) -> float:
    """p^2 Var[a] + Var(r) E|a|^2, where ``p`` is the gate mean E[r]."""
    if var_r < 0:
        raise ParameterError(f"var_r must be >= 0, got {var_r}")
    return float(p * p * var_a + var_r * mean_sq_a)


# -- estimators -----------------------------------------------------------------


def trace_variance(samples) -> tuple:
    """Trace of the sample covariance of rows and its Monte-Carlo standard error.

    Returns (variance, se). The SE is that of the mean of |x - mean|^2.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ParameterError("need at least two samples")
    dev = x - x.mean(axis=0)
    sq = np.einsum("ij,ij->i", dev, dev)
    var = float(sq.sum() / (n - 1))
    se = float(sq.std(ddof=1) / math.sqrt(n)) * n / (n - 1)
    return var, se


def sample_a(family: str, n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Synthetic gradient samples: deterministic, gaussian or student_t (df 5)."""
    mean = np.linspace(1.0, -0.5, dim)
    if family == "deterministic":
        return np.broadcast_to(mean, (n, dim)).copy()
    if family == "gaussian":
        return mean + rng.standard_normal((n, dim))
    if family == "student_t":
        return mean + rng.standard_t(5, (n, dim))
    raise ParameterError(f"unknown family {family!r}")


FAMILIES = ("deterministic", "gaussian", "student_t")


@dataclass
class CheckRecord:
    name: str
    predicted: float
    observed: float
    tolerance: float
    passed: bool
    detail: dict = field(default_factory=dict)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


# -- Bernoulli gate on synthetic gradients ----------------------------------------


def hard_gate_check(ps=(0.1, 0.3, 0.5, 0.7, 0.9), n: int = 100_000, dim: int = 8, seed: int = 0,
                n_se: float = 3.0) -> CheckRecord:
    """Empirical Var[z a] against the closed form, per family and p."""
    cases = []
    worst = 0.0
    for fi, family in enumerate(FAMILIES):
        for pi, p in enumerate(ps):
            rng = np.random.default_rng([seed, fi, pi])
            a = sample_a(family, n, dim, rng)
            z = draw_bernoulli_gates(p, rng, n)
            observed, se = trace_variance(z[:, None] * a)
            var_a, _ = trace_variance(a)
            predicted = theseus_variance_closed_form(p, a.mean(axis=0), var_a)
            z_score = abs(observed - predicted) / max(se, FP_SLACK)
            worst = max(worst, z_score)
            cases.append({"family": family, "p": p, "predicted": predicted, "observed": observed,
                          "se": se, "z": z_score, "passed": z_score <= n_se})
    return CheckRecord("hard_gate", 0.0, worst, n_se, all(c["passed"] for c in cases), {"cases": cases})


# -- soft gate --------------------------------------------------------------------


def soft_gate_check(taus=(0.1, 0.5, 1.0, 2.0), p: float = 0.5, n: int = 100_000, dim: int = 8,
                    family: str = "gaussian", seed: int = 0, n_se: float = 3.0) -> CheckRecord:
    """Excess of Var[r a] over the deterministic-gate variance, against Var(r) E|a|^2.

    All temperatures share the same logistic noise and the same ``a`` draws,
    so differences across temperatures come from the gate alone.
    """
    rng = np.random.default_rng([seed, 7])
    a = sample_a(family, n, dim, rng)
    u = rng.random(n)
    noise = np.log(u) - np.log1p(-u)
    var_a, _ = trace_variance(a)
    mean_sq_a = float(np.einsum("ij,ij->i", a, a).mean())
    cases = []
    for tau in taus:
        r = draw_gumbel_gates(p, tau, rng, n, noise=noise)
        m_r, var_r = float(r.mean()), float(r.var(ddof=1))
        observed, se = trace_variance(r[:, None] * a)
        deterministic = m_r * m_r * var_a
        excess = observed - deterministic
        predicted_excess = var_r * mean_sq_a
        z_score = abs(excess - predicted_excess) / max(se, FP_SLACK)
        cases.append({"tau": tau, "mean_r": m_r, "var_r": var_r, "observed": observed, "se": se,
                      "deterministic": deterministic, "excess": excess,
                      "predicted_excess": predicted_excess,
                      "closed_form": soft_gate_variance_closed_form(m_r, var_r, mean_sq_a, var_a),
                      "z": z_score, "passed": z_score <= n_se})
    ordered = sorted(cases, key=lambda c: c["var_r"])
    monotone = all(b["observed"] >= a_["observed"] for a_, b in zip(ordered, ordered[1:]))
    worst = max(c["z"] for c in cases)
    return CheckRecord("soft_gate", 0.0, worst, n_se, monotone and all(c["passed"] for c in cases),
                       {"cases": cases, "monotone_in_var_r": monotone, "p": p, "var_a": var_a,
                        "mean_sq_a": mean_sq_a})


# -- live gate-induced gradient variance --------------------------------------------

GATE_METHODS = ("dcr", "theseus", "theseus_gumbel")
_SITE_MODE = {"dcr": "dcr_blend", "theseus": "theseus_hard", "theseus_gumbel": "theseus_soft"}


@dataclass
class VarianceReport:
    method: str
    site: int
    p: float
    gate_variance: float
    gate_variance_se: float
    total_variance: float
    mean_sq_a: float
    closed_form: float
    var_r: float = 0.0


def site_gradient(model: MicroTransformer, site: int, batch, site_mode: str, gate, other_alpha: float,
                  label_smoothing: float = 0.1) -> np.ndarray:
    """Task-loss gradient over the student parameters of ``site``.

    ``gate`` is in the convention of ``site_mode``; other replaced sites run
    the deterministic blend at teacher weight ``other_alpha``.
    """
    tokens, labels = batch
    modes = {l: "dcr_blend" for l in model.sites}
    gates = {l: other_alpha for l in model.sites}
    modes[site], gates[site] = site_mode, gate
    model.zero_grad()
    fwd = model_forward(model, tokens, gates, modes)
    loss = ad.cross_entropy(fwd.logits, labels, label_smoothing)
    if loss.requires_grad:
        loss.backward()
    return flat_grad(model.sites[site].student_parameters())


def empirical_gate_variance(model: MicroTransformer, site: int, method: str, p: float, batches: Sequence,
                            gate_draws_per_batch: int, rng: np.random.Generator, other_alpha: float = 0.0,
                            tau: float = 1.0, label_smoothing: float = 0.1) -> VarianceReport:
    """Mean over batches of the across-draw gradient variance at ``site``.

    ``p`` is the expected student weight at the site (the deterministic blend
    uses alpha = 1 - p). Gradients are cached per distinct gate value, so a
    hard gate costs two backward passes per batch. Variances are computed on
    gradients shifted by the first draw, which makes a constant gate give
    exactly zero.
    """
    if method not in GATE_METHODS:
        raise ParameterError(f"method must be one of {GATE_METHODS}, got {method!r}")
    if method != "dcr" and gate_draws_per_batch < 2:
        raise ParameterError("a stochastic gate needs at least two draws per batch")
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"p must be in [0, 1], got {p}")
    if not batches:
        raise ParameterError("no batches")
    mode = _SITE_MODE[method]
    per_batch, mean_sq, all_grads, r_values = [], [], [], []
    for batch in batches:
        if method == "dcr":
            gates = np.full(max(gate_draws_per_batch, 1), 1.0 - p)
        elif method == "theseus":
            gates = draw_bernoulli_gates(p, rng, gate_draws_per_batch)
        else:
            gates = draw_gumbel_gates(p, tau, rng, gate_draws_per_batch)
            r_values.extend(gates.tolist())
        cache = {}
        for g in gates:
            if g not in cache:
                cache[g] = site_gradient(model, site, batch, mode, float(g), other_alpha, label_smoothing)
        grads = np.stack([cache[g] for g in gates])
        shifted = grads - grads[0]
        per_batch.append(trace_variance(shifted)[0] if len(gates) > 1 else 0.0)
        all_grads.append(grads)
        probe = site_gradient(model, site, batch, "student_only", None, other_alpha, label_smoothing)
        mean_sq.append(float(probe @ probe))
    per_batch = np.asarray(per_batch)
    stacked = np.concatenate(all_grads)
    total = trace_variance(stacked - stacked[0])[0] if len(stacked) > 1 else 0.0
    mean_sq_a = float(np.mean(mean_sq))
    var_r = float(np.var(r_values, ddof=1)) if len(r_values) > 1 else 0.0
    if method == "dcr":
        closed = 0.0
    elif method == "theseus":
        closed = p * (1.0 - p) * mean_sq_a
    else:
        closed = var_r * mean_sq_a
    se = float(per_batch.std(ddof=1) / math.sqrt(len(per_batch))) if len(per_batch) > 1 else 0.0
    return VarianceReport(method, site, p, float(per_batch.mean()), se, total, mean_sq_a, closed, var_r)


def probe_batches(tokens, labels, n_batches: int, batch_size: int, rng: np.random.Generator) -> list:
    out = []
    for _ in range(n_batches):
        idx = rng.choice(len(labels), batch_size, replace=False)
        out.append((tokens[idx], labels[idx]))
    return out


def gate_variance_check(model: MicroTransformer, batches: Sequence, sites=None, p: float = 0.5, draws: int = 32,
                other_alpha: float = 0.0, seed: int = 0, rel_tol: float = 0.10) -> CheckRecord:
    """Deterministic blend must give exactly zero; the hard gate must match
    p(1-p) E|a(S;X)|^2 within ``rel_tol`` at every probed site."""
    sites = sorted(model.sites) if sites is None else list(sites)
    cases = []
    for site in sites:
        rng = np.random.default_rng([seed, site])
        dcr = empirical_gate_variance(model, site, "dcr", p, batches, draws, rng, other_alpha)
        th = empirical_gate_variance(model, site, "theseus", p, batches, draws, rng, other_alpha)
        rel = abs(th.gate_variance - th.closed_form) / max(th.closed_form, FP_SLACK)
        cases.append({"site": site, "dcr_gate_variance": dcr.gate_variance,
                      "theseus_gate_variance": th.gate_variance, "theseus_se": th.gate_variance_se,
                      "closed_form": th.closed_form, "gap": th.gate_variance - dcr.gate_variance,
                      "mean_sq_a": th.mean_sq_a, "rel_error": rel,
                      "passed": dcr.gate_variance == 0.0 and rel <= rel_tol})
    worst = max(c["rel_error"] for c in cases)
    return CheckRecord("gate_variance", 0.0, worst, rel_tol, all(c["passed"] for c in cases),
                       {"cases": cases, "p": p, "draws": draws, "batches": len(batches),
                        "other_alpha": other_alpha})


# -- curvature bias -----------------------------------------------------------------


class Quadratic:
    """psi(y) = 0.5 y^T A y + b^T y."""

    def __init__(self, a, b=None):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.zeros(self.a.shape[0]) if b is None else np.asarray(b, dtype=np.float64)

    def __call__(self, y):
        y = np.asarray(y, dtype=np.float64)
        return float(0.5 * y @ self.a @ y + self.b @ y)

    def hessian(self, y):
        return self.a


class Linear:
    def __init__(self, w, c: float = 0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.c = c

    def __call__(self, y):
        return float(self.w @ np.asarray(y, dtype=np.float64) + self.c)

    def hessian(self, y):
        return np.zeros((len(self.w), len(self.w)))


class LogSumExp:
    def __call__(self, y):
        y = np.asarray(y, dtype=np.float64)
        m = y.max()
        return float(m + np.log(np.exp(y - m).sum()))

    def hessian(self, y):
        y = np.asarray(y, dtype=np.float64)
        s = np.exp(y - y.max())
        s /= s.sum()
        return np.diag(s) - np.outer(s, s)


def segment_hessian_bound(psi, t, s, n_samples: int = 1000) -> float:
    """Largest Hessian operator norm over ``n_samples`` evenly spaced segment points, endpoints included."""
    t, s = np.asarray(t, dtype=np.float64), np.asarray(s, dtype=np.float64)
    lams = np.linspace(0.0, 1.0, max(n_samples, 2))
    return max(float(np.linalg.norm(psi.hessian((1 - l) * t + l * s), 2)) for l in lams)


@dataclass
class CurvatureProbe:
    psi: Callable
    t: np.ndarray
    s: np.ndarray
    p: float
    m: float

    @property
    def delta(self) -> np.ndarray:
        return np.asarray(self.s, dtype=np.float64) - np.asarray(self.t, dtype=np.float64)

    @property
    def mu(self) -> np.ndarray:
        return (1.0 - self.p) * np.asarray(self.t, dtype=np.float64) + self.p * np.asarray(self.s, dtype=np.float64)


def curvature_bias_check(probe: CurvatureProbe, n_samples: int = 1000) -> tuple:
    """Return (bias, bound, holds) for a binary gate; E psi(Y) is enumerated exactly.

    ``n_samples`` segment points are used to confirm ``probe.m`` bounds the
    Hessian norm; a smaller observed bound raises ``ProbeError``.
    """
    if not 0.0 <= probe.p <= 1.0:
        raise ParameterError(f"p must be in [0, 1], got {probe.p}")
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    if not (math.isfinite(probe.m) and probe.m >= 0):
        raise ProbeError(f"curvature bound M={probe.m} is not a finite nonnegative number")
    if hasattr(probe.psi, "hessian"):
        seen = segment_hessian_bound(probe.psi, probe.t, probe.s, n_samples)
        if seen > probe.m * (1.0 + 1e-9) + FP_SLACK:
            raise ProbeError(f"M={probe.m} is below the sampled Hessian norm {seen}")
    p = probe.p
    expected = p * probe.psi(probe.s) + (1.0 - p) * probe.psi(probe.t)
    bias = abs(expected - probe.psi(probe.mu))
    d = probe.delta
    bound = 0.5 * probe.m * p * (1.0 - p) * float(d @ d)
    return bias, bound, bias <= bound + FP_SLACK * max(1.0, bound)


def deterministic_bias(probe: CurvatureProbe) -> float:
    """Bias of the deterministic blend: psi evaluated at its own mean."""
    y = probe.mu
    return abs(probe.psi(y) - probe.psi(y))


def make_curvature_probes(n: int = 100, dim: int = 4, seed: int = 0) -> list:
    """Half isotropic quadratics (the tight case), half log-sum-exp on random vectors."""
    probes = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        t, s = rng.normal(0, 2, dim), rng.normal(0, 2, dim)
        p = float(rng.uniform(0.05, 0.95))
        if i % 2 == 0:
            c = float(rng.uniform(0.1, 3.0))
            psi = Quadratic(c * np.eye(dim), rng.normal(size=dim))
            m = c
        else:
            psi = LogSumExp()
            m = segment_hessian_bound(psi, t, s, 1000)
        probes.append(CurvatureProbe(psi, t, s, p, m))
    return probes


def curvature_check(n_probes: int = 100, dim: int = 4, seed: int = 0, tight_tol: float = 1e-12) -> CheckRecord:
    cases = []
    for i, probe in enumerate(make_curvature_probes(n_probes, dim, seed)):
        bias, bound, holds = curvature_bias_check(probe, 1000)
        tight = isinstance(probe.psi, Quadratic)
        cases.append({"kind": type(probe.psi).__name__, "p": probe.p, "bias": bias, "bound": bound,
                      "holds": holds, "dcr_bias": deterministic_bias(probe),
                      "gap": bound - bias, "tight": tight,
                      "tight_ok": (abs(bound - bias) <= tight_tol * max(1.0, bound)) if tight else True})
    violations = sum(not c["holds"] for c in cases)
    tight_ok = all(c["tight_ok"] for c in cases)
    dcr_zero = all(c["dcr_bias"] == 0.0 for c in cases)
    worst_tight = max((c["gap"] for c in cases if c["tight"]), default=0.0, key=abs)
    return CheckRecord("curvature", 0.0, float(violations), 0.0, violations == 0 and tight_ok and dcr_zero,
                       {"violations": violations, "probes": len(cases), "equality_on_quadratics": tight_ok,
                        "max_quadratic_gap": worst_tight, "dcr_bias_zero": dcr_zero, "cases": cases})


# -- loss path ------------------------------------------------------------------------


@dataclass
class PathProbe:
    """Loss along the straight path from teacher output ``t`` to student output ``s``.

    Here ``alpha`` is the student weight: y(0) = t and y(1) = s. ``d`` defaults
    to |s - t| and may be any larger bound.
    """
    f: Callable
    t: np.ndarray
    s: np.ndarray
    lipschitz: float
    d: Optional[float] = None

    def __post_init__(self):
        dist = float(np.linalg.norm(np.asarray(self.s) - np.asarray(self.t)))
        if self.d is None:
            self.d = dist
        elif self.d < dist * (1.0 - 1e-12):
            raise ProbeError(f"D={self.d} is smaller than |S - T|={dist}")

    def y(self, alpha: float) -> np.ndarray:
        return (1.0 - alpha) * np.asarray(self.t) + alpha * np.asarray(self.s)


def loss_path_check(probe: PathProbe, alpha_grid: Sequence[float]) -> float:
    """max over the grid of |f(y(a)) - f(y(0))| - L_y a D; <= 0 means the bound holds."""
    alphas = np.asarray(alpha_grid, dtype=np.float64)
    if np.any(alphas < 0) or np.any(alphas > 1):
        raise ParameterError("alpha grid must lie in [0, 1]")
    f0 = probe.f(probe.y(0.0))
    return max(abs(probe.f(probe.y(a)) - f0) - probe.lipschitz * a * probe.d for a in alphas)


def estimate_lipschitz(f: Callable, t, s, n_pairs: int = 64, rng=None, safety: float = 2.0) -> float:
    """``safety`` times the largest difference quotient between random segment points."""
    rng = np.random.default_rng(0) if rng is None else rng
    t, s = np.asarray(t), np.asarray(s)
    best = 0.0
    for _ in range(n_pairs):
        a, b = rng.random(2)
        if a == b:
            continue
        ya, yb = (1 - a) * t + a * s, (1 - b) * t + b * s
        dist = float(np.linalg.norm(ya - yb))
        if dist > 0:
            best = max(best, abs(f(ya) - f(yb)) / dist)
    return safety * best


def tail_loss(model: MicroTransformer, site: int, batch, other_alpha: float = 0.0,
              label_smoothing: float = 0.1) -> Callable:
    """Loss as a function of the residual branch output at ``site``, everything else frozen."""
    tokens, labels = batch
    gates = {l: other_alpha for l in model.sites}

    def f(y):
        with no_grad():
            fwd = model_forward(model, tokens, gates, "dcr_blend", branch_override={site: Tensor(y)})
            return ad.cross_entropy(fwd.logits, labels, label_smoothing).item()

    return f


def site_branches(model: MicroTransformer, site: int, batch, other_alpha: float = 0.0):
    """Teacher and student branch outputs at ``site`` on ``batch``."""
    gates = {l: other_alpha for l in model.sites}
    with no_grad():
        fwd = model_forward(model, batch[0], gates, "dcr_blend", need_teacher=True, need_student=True)
    out = fwd.blocks[site]
    return out.teacher_branch.data.copy(), out.student_branch.data.copy()


def path_bound_check(model: MicroTransformer, batches: Sequence, sites=None, grid_points: int = 21,
                other_alpha: float = 0.0, seed: int = 0, safety: float = 2.0, n_pairs: int = 32) -> CheckRecord:
    """One (T, S) pair per batch, cycling over the replaced sites."""
    sites = sorted(model.sites) if sites is None else list(sites)
    grid = np.linspace(0.0, 1.0, grid_points)
    cases = []
    for i, batch in enumerate(batches):
        site = sites[i % len(sites)]
        t, s = site_branches(model, site, batch, other_alpha)
        f = tail_loss(model, site, batch, other_alpha)
        lip = estimate_lipschitz(f, t, s, n_pairs, np.random.default_rng([seed, i]), safety)
        probe = PathProbe(f, t, s, lip)
        v = loss_path_check(probe, grid)
        cases.append({"pair": i, "site": site, "lipschitz": lip, "d": probe.d, "max_violation": v,
                      "passed": v <= FP_SLACK})
    worst = max(c["max_violation"] for c in cases)
    return CheckRecord("path_bound", 0.0, worst, 0.0, all(c["passed"] for c in cases),
                       {"pairs": len(cases), "grid_points": grid_points, "cases": cases})


# -- reporting ------------------------------------------------------------------------


def records_to_json(records, path=None) -> str:
    text = json.dumps([_clean(asdict(r)) for r in records], indent=2)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


def format_records(records) -> str:
    rows = [("check", "observed", "tolerance", "result")]
    rows += [(r.name, f"{r.observed:.4g}", f"{r.tolerance:.4g}", "pass" if r.passed else "FAIL") for r in records]
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows)


# -- full suite ------------------------------------------------------------------------


@dataclass
class SuiteConfig:
    snapshot_fraction: float = 0.15
    probe_batch_size: int = 32
    variance_batches: int = 64
    variance_draws: int = 32
    variance_p: float = 0.5
    path_pairs: int = 20
    path_grid: int = 21
    curvature_probes: int = 100
    mc_draws: int = 100_000


def mid_replacement_snapshot(cfg, teacher: MicroTransformer, teacher_acc: float, fraction: float):
    """Students after a deterministic-blend run cut at ``fraction`` of its schedule.

    Returns (model, alpha) where alpha is the teacher weight at the cut.
    """
    run_cfg = cfg.replace(method="dcr", schedule="dcr_aggr20", eval_points=1)
    rec = run_experiment(run_cfg, teacher, teacher_acc, persist=False, stop_fraction=fraction)
    t = rec.rows[-1]["t_fraction"]
    return rec.model, run_cfg.method_config().schedule(t)


def run_suite(cfg, teacher: MicroTransformer, teacher_acc: float, suite: Optional[SuiteConfig] = None,
              out_dir: Optional[str] = None) -> list:
    """All five checks; writes theory_summary.json and theory_report.txt when ``out_dir`` is set."""
    suite = suite or SuiteConfig()
    records = [hard_gate_check(n=suite.mc_draws, seed=cfg.seed),
               soft_gate_check(n=suite.mc_draws, seed=cfg.seed)]
    model, alpha = mid_replacement_snapshot(cfg, teacher, teacher_acc, suite.snapshot_fraction)
    _, val = make_synthetic_task(cfg.task())
    rng = np.random.default_rng([cfg.seed, 11])
    batches = probe_batches(val.tokens, val.labels, suite.variance_batches, suite.probe_batch_size, rng)
    records.append(gate_variance_check(model, batches, p=suite.variance_p, draws=suite.variance_draws, other_alpha=alpha,
                               seed=cfg.seed))
    records.append(curvature_check(suite.curvature_probes, seed=cfg.seed))
    pairs = probe_batches(val.tokens, val.labels, suite.path_pairs, suite.probe_batch_size, rng)
    records.append(path_bound_check(model, pairs, grid_points=suite.path_grid, other_alpha=alpha, seed=cfg.seed))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        records_to_json(records, os.path.join(out_dir, "theory_summary.json"))
        with open(os.path.join(out_dir, "theory_report.txt"), "w") as fh:
            fh.write(format_records(records) + "\n")
    return records
