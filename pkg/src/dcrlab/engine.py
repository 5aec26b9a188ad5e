"""One training step for every replacement method.

Methods:

    student_only        students in place from step 0, task loss only
    dcr                 deterministic blend with teacher weight alpha(t)
    dcr_dfg             dcr plus feature guidance lambda(t) * L_dfg
    theseus             hard Bernoulli gate per layer, p(t) = P(student)
    theseus_gumbel      soft binary-concrete gate per layer
    theseus_gumbel_dfg  theseus_gumbel plus feature guidance
    kd                  students in place, plus soft-target loss against a
                        full teacher forward pass

Throughout, the student branch weight is written ``c``: ``1 - alpha`` for the
DCR blend and ``z`` or ``r`` for the Theseus gates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import ConfigError, NumericError, ParameterError, StateError
from .gates import GateSchedule, dcr_aggr20, draw_gates, theseus_aggr20
from .model import MicroTransformer, model_forward

METHODS = ("student_only", "dcr", "dcr_dfg", "theseus", "theseus_gumbel", "theseus_gumbel_dfg", "kd")

_MODE = {
    "student_only": "student_only",
    "kd": "student_only",
    "dcr": "dcr_blend",
    "dcr_dfg": "dcr_blend",
    "theseus": "theseus_hard",
    "theseus_gumbel": "theseus_soft",
    "theseus_gumbel_dfg": "theseus_soft",
}


@dataclass
class MethodConfig:
    kind: str = "dcr"
    schedule: Optional[GateSchedule] = None
    dfg_weight: float = 1.0
    dfg_schedule: GateSchedule = field(default_factory=dcr_aggr20)
    tau: float = 1.0
    kd_temperature: float = 4.0
    kd_weight: float = 1.0
    per_example_gates: bool = False

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ConfigError(f"unknown method {self.kind!r}; expected one of {METHODS}", key="method")
        if self.schedule is None:
            self.schedule = theseus_aggr20() if self.kind.startswith("theseus") else dcr_aggr20()
        if self.dfg_weight < 0:
            raise ConfigError(f"dfg_weight must be >= 0, got {self.dfg_weight}", key="dfg_weight")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}", key="tau")
        if self.kd_temperature <= 0:
            raise ConfigError(f"kd_temperature must be positive, got {self.kd_temperature}", key="kd_temperature")

    @property
    def mode(self) -> str:
        return _MODE[self.kind]

    @property
    def uses_dfg(self) -> bool:
        return self.kind.endswith("_dfg")

    def dfg_lambda(self, t: float) -> float:
        return self.dfg_weight * self.dfg_schedule(t) if self.uses_dfg else 0.0

    def eval_gates(self, t: float, layers) -> dict:
        """Deterministic gates used for evaluation: the schedule value itself,
        which for the stochastic methods is the expected student weight."""
        if self.kind in ("student_only", "kd"):
            return {}
        v = self.schedule(t)
        return {l: v for l in layers}

    @property
    def eval_mode(self) -> str:
        return "theseus_soft" if self.kind.startswith("theseus") else self.mode


@dataclass
class StepOutput:
    total_loss: float
    task_loss: float
    dfg_loss: float
    kd_loss: float
    dfg_lambda: float
    logits: np.ndarray
    blocks: dict
    gates: dict
    teacher_evals: int


def dfg_loss(blocks: dict) -> Tensor:
    """Sum over sites of the squared student/teacher branch distance, batch-averaged."""
    if not blocks:
        raise StateError("feature guidance needs at least one replaced site")
    total = None
    for l, out in sorted(blocks.items()):
        if out.teacher_branch is None or out.student_branch is None:
            raise StateError(f"site {l} is missing its teacher or student branch")
        diff = out.student_branch - out.teacher_branch
        batch = diff.shape[0] if diff.ndim == 3 else 1
        term = ad.scale((diff * diff).sum(), 1.0 / batch)
        total = term if total is None else total + term
    return total


def kd_soft_target_loss(student_logits: Tensor, teacher_logits, temperature: float) -> Tensor:
    """temperature^2 * KL(softmax(t/T) || softmax(s/T)), averaged over the batch."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    t = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits, dtype=np.float64)
    if t.shape != student_logits.shape:
        raise ParameterError(f"logit shapes differ: {student_logits.shape} vs {t.shape}")
    b = t.shape[0]
    t_scaled = t / temperature
    t_scaled = t_scaled - t_scaled.max(axis=-1, keepdims=True)
    log_pt = t_scaled - np.log(np.exp(t_scaled).sum(axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = ad.log_softmax_rows(ad.scale(student_logits, 1.0 / temperature))
    cross = ad.scale((Tensor(pt) * log_ps).sum(), -1.0 / b)
    return ad.scale(cross + float((pt * log_pt).sum() / b), temperature**2)


def forward_losses(model: MicroTransformer, tokens, labels, method: MethodConfig, t_fraction: float,
                   gates: dict, label_smoothing: float = 0.1, need_teacher: bool = False,
                   need_student: bool = False):
    """Forward pass and loss graph for one batch under fixed gate values.

    ``gates`` maps layer -> gate value in the method's own convention.
    Returns (total, task, dfg, kd, lam, forward_output, teacher_evals).
    """
    mode = method.mode
    fwd = model_forward(model, tokens, gates, mode,
                        need_teacher=need_teacher or method.uses_dfg,
                        need_student=need_student or method.uses_dfg)
    teacher_evals = fwd.teacher_evals
    task = ad.cross_entropy(fwd.logits, labels, label_smoothing)
    total, dfg, kd = task, None, None
    lam = method.dfg_lambda(t_fraction)
    if method.uses_dfg:
        dfg = dfg_loss(fwd.blocks)
        total = total + ad.scale(dfg, lam)
    if method.kind == "kd":
        with no_grad():
            teacher_logits = model_forward(model, tokens, mode="teacher_only").logits
        teacher_evals += model.spec.depth
        kd = kd_soft_target_loss(fwd.logits, teacher_logits, method.kd_temperature)
        total = total + ad.scale(kd, method.kd_weight)
    return total, task, dfg, kd, lam, fwd, teacher_evals


def training_step(model: MicroTransformer, batch, method: MethodConfig, t_fraction: float,
                  rng: np.random.Generator, gates: Optional[dict] = None, label_smoothing: float = 0.1,
                  backward: bool = True, need_teacher: bool = False) -> StepOutput:
    """Forward, loss and (optionally) backward for one minibatch.

    Gates are drawn from ``rng`` before the batch is touched unless ``gates``
    (layer -> GateDraw or raw value) is given. Student gradients are reset
    and refilled; teacher and backbone tensors never receive gradients.
    """
    tokens, labels = batch
    if len(labels) == 0:
        raise ParameterError("empty batch")
    if not 0.0 <= t_fraction <= 1.0:
        raise ParameterError(f"t_fraction must be in [0, 1], got {t_fraction}")
    layers = sorted(model.sites)
    if gates is None:
        gates = draw_gates(method, t_fraction, layers, rng, batch_size=len(labels))
    values = {l: getattr(g, "value", g) for l, g in gates.items()}
    snapshot = {"method": method.kind, "t_fraction": t_fraction,
                "gates": {l: np.asarray(v).tolist() for l, v in values.items()}}
    try:
        total, task, dfg, kd, lam, fwd, teacher_evals = forward_losses(
            model, tokens, labels, method, t_fraction, values, label_smoothing, need_teacher)
    except NumericError as exc:
        raise NumericError(f"non-finite value in forward pass: {exc}", snapshot) from exc
    if not np.isfinite(total.item()):
        raise NumericError("loss is NaN", snapshot)
    if backward:
        model.zero_grad()
        if total.requires_grad:
            total.backward()
    return StepOutput(
        total_loss=total.item(),
        task_loss=task.item(),
        dfg_loss=0.0 if dfg is None else dfg.item(),
        kd_loss=0.0 if kd is None else kd.item(),
        dfg_lambda=lam,
        logits=fwd.logits.data,
        blocks=fwd.blocks,
        gates=gates,
        teacher_evals=teacher_evals,
    )


def flat_grad(params) -> np.ndarray:
    """Concatenate gradients, using zeros where a tensor has none."""
    return np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
                           for p in params])
