"""Seeded end-to-end replacement runs and their on-disk records.

A run directory holds:

    config.txt    resolved configuration (key = value)
    metrics.csv   one row per evaluation point, fixed header, %.9g numbers
    timing.csv    mean wall time per step for each evaluation interval
    summary.json  method, seed, steps-to-threshold, final accuracy/similarity
    final.ckpt    backbone plus trained students

Wall times live in their own file so that ``metrics.csv`` is bit-identical
across reruns of the same configuration.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import no_grad
from .config import RunConfig, write_config
from .data import Dataset, make_synthetic_task
from .engine import MethodConfig, training_step
from .errors import NumericError
from .model import MicroTransformer, load_model, model_forward, save_model
from .optim import AdamWState, adamw_step, clip_grad_norm, cosine_lr

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


@dataclass
class RunRecord:
    config: RunConfig
    rows: list
    summary: dict
    out_dir: Optional[str] = None
    timings: list = field(default_factory=list)
    model: Optional[MicroTransformer] = None

    @property
    def status(self) -> str:
        return self.summary.get("status", "ok")


def interface_cosine_similarity(t_branch, s_branch) -> float:
    """Batch mean of per-example cosine similarity between flattened branches.

    A zero-norm branch contributes similarity 0.
    """
    t = np.asarray(getattr(t_branch, "data", t_branch), dtype=np.float64)
    s = np.asarray(getattr(s_branch, "data", s_branch), dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"branch shapes differ: {t.shape} vs {s.shape}")
    return float(np.mean(_cosines(t, s)))


def _cosines(t: np.ndarray, s: np.ndarray) -> np.ndarray:
    if t.ndim < 2:
        t, s = t[None], s[None]
    t = t.reshape(t.shape[0], -1)
    s = s.reshape(s.shape[0], -1)
    nt = np.linalg.norm(t, axis=1)
    ns = np.linalg.norm(s, axis=1)
    denom = nt * ns
    cos = np.divide((t * s).sum(axis=1), denom, out=np.zeros_like(denom), where=denom > 0)
    return np.clip(cos, -1.0, 1.0)


# -- teacher -----------------------------------------------------------------


def accuracy(model: MicroTransformer, data: Dataset, mode="teacher_only", gates=None) -> float:
    correct = 0
    with no_grad():
        for tokens, labels in data.batches(EVAL_CHUNK):
            logits = model_forward(model, tokens, gates, mode).logits.data
            correct += int((logits.argmax(axis=-1) == labels).sum())
    return correct / len(data)


def train_teacher(cfg: RunConfig):
    """Train every backbone parameter on the synthetic task; return (model, val_acc)."""
    train, val = make_synthetic_task(cfg.task())
    spec = cfg.model_spec()
    model = MicroTransformer(spec, seed=cfg.teacher_seed)
    model.set_backbone_trainable(True)
    params = model.trainable_parameters()
    state = AdamWState()
    rng = np.random.default_rng([cfg.teacher_seed, 7])
    steps_per_epoch = math.ceil(len(train) / cfg.teacher_batch_size)
    total = cfg.teacher_epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.teacher_epochs):
        for tokens, labels in train.batches(cfg.teacher_batch_size, rng):
            model.zero_grad()
            loss = ad.cross_entropy(model_forward(model, tokens).logits, labels, cfg.label_smoothing)
            loss.backward()
            grads = [p.grad for p in params]
            clip_grad_norm(grads, cfg.clip_norm)
            lr = cosine_lr(step, total, cfg.teacher_lr, cfg.min_lr)
            adamw_step([p.data for p in params], grads, state, lr, (cfg.beta1, cfg.beta2), cfg.adam_eps,
                       cfg.weight_decay)
            step += 1
        log.info("teacher epoch %d loss %.4f", epoch, loss.item())
    model.set_backbone_trainable(False)
    model.zero_grad()
    return model, accuracy(model, val)


def teacher_path_for(cfg: RunConfig) -> str:
    return cfg.teacher_path or os.path.join(cfg.out_dir, "teacher.ckpt")


def ensure_teacher(cfg: RunConfig):
    """Load the teacher checkpoint, training and saving it first if absent."""
    path = teacher_path_for(cfg)
    if os.path.exists(path):
        model = load_model(path)
        return model, float(model.meta["val_acc"])
    model, acc = train_teacher(cfg)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    save_model(path, model, {"val_acc": repr(acc), "data_seed": cfg.data_seed, "teacher_seed": cfg.teacher_seed})
    return model, acc


def make_teacher(cfg: RunConfig):
    path = teacher_path_for(cfg)
    model, acc = train_teacher(cfg)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    save_model(path, model, {"val_acc": repr(acc), "data_seed": cfg.data_seed, "teacher_seed": cfg.teacher_seed})
    return path, acc


# -- evaluation ----------------------------------------------------------------


def evaluate(model: MicroTransformer, method: MethodConfig, t: float, data: Dataset):
    """Accuracy under the deterministic evaluation gate, accuracy of the fully
    replaced model, and per-site interface cosine similarity."""
    layers = sorted(model.sites)
    gates = method.eval_gates(t, layers)
    mode = method.eval_mode
    correct = replaced = 0
    cos_sum = {l: 0.0 for l in layers}
    with no_grad():
        for tokens, labels in data.batches(EVAL_CHUNK):
            fwd = model_forward(model, tokens, gates, mode, need_teacher=True, need_student=True)
            correct += int((fwd.logits.data.argmax(-1) == labels).sum())
            for l, out in fwd.blocks.items():
                cos_sum[l] += float(_cosines(out.teacher_branch.data, out.student_branch.data).sum())
            if mode == "student_only":
                replaced = correct
            else:
                logits = model_forward(model, tokens, mode="student_only").logits.data
                replaced += int((logits.argmax(-1) == labels).sum())
    n = len(data)
    return correct / n, replaced / n, {l: v / n for l, v in cos_sum.items()}


# -- runs ------------------------------------------------------------------------


class _Window:
    """Running means over one evaluation interval."""

    def __init__(self):
        self.n = 0
        self.sums = {}
        self.g_mean = None
        self.g_m2 = None

    def add(self, g: np.ndarray, **values):
        self.n += 1
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + v
        if self.g_mean is None:
            self.g_mean = np.zeros_like(g)
            self.g_m2 = np.zeros_like(g)
        delta = g - self.g_mean
        self.g_mean += delta / self.n
        self.g_m2 += delta * (g - self.g_mean)

    def mean(self, key):
        return self.sums.get(key, 0.0) / self.n if self.n else 0.0

    def grad_var(self):
        if self.n < 2:
            return 0.0
        return float(self.g_m2.sum() / (self.n - 1))


def metrics_header(layers) -> list:
    return (["step", "epoch", "t_fraction", "gate", "student_weight", "dfg_lambda", "train_loss", "task_loss",
             "dfg_loss", "val_acc", "replaced_val_acc", "grad_var", "teacher_evals"]
            + [f"cos_block{l}" for l in layers])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return "%.9g" % v


def write_metrics(path, rows, layers):
    header = metrics_header(layers)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in header])


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("step", "epoch", "teacher_evals") else float(v)) for k, v in r.items()} for r in rows]


def steps_to_threshold(rows, threshold: float, key: str = "replaced_val_acc"):
    for row in rows:
        if row[key] >= threshold:
            return row["step"]
    return None


def _student_weight(method: MethodConfig, t: float) -> float:
    if method.kind in ("student_only", "kd"):
        return 1.0
    v = method.schedule(t)
    return 1.0 - v if method.mode == "dcr_blend" else v


def run_experiment(cfg: RunConfig, teacher: Optional[MicroTransformer] = None, teacher_acc: Optional[float] = None,
                   persist: bool = True, stop_fraction: float = 1.0) -> RunRecord:
    """Train students under ``cfg.method`` and record metrics.

    ``stop_fraction`` < 1 halts after that share of the schedule, leaving a
    mid-replacement snapshot in ``RunRecord.model``.

    Divergence (a non-finite loss or gradient) stops the run; the rows
    collected so far are kept and the summary carries the diagnostic.
    """
    if teacher is None:
        teacher, teacher_acc = ensure_teacher(cfg)
    elif teacher_acc is None:
        teacher_acc = float(getattr(teacher, "meta", {}).get("val_acc", "nan"))
    method = cfg.method_config()
    train, val = make_synthetic_task(cfg.task())
    model = teacher.copy().attach_students(cfg.seed, cfg.replaced)
    layers = sorted(model.sites)
    params = model.student_parameters()
    state = AdamWState()
    data_rng = np.random.default_rng([cfg.seed, 1])
    gate_rng = np.random.default_rng([cfg.seed, 2])
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    eval_every = max(1, total // cfg.eval_points)
    threshold = cfg.threshold_frac * teacher_acc
    stop_at = total if stop_fraction >= 1.0 else max(1, int(stop_fraction * total))

    rows, timings = [], []
    window = _Window()
    teacher_evals_total = 0
    max_post_clip = 0.0
    status, diagnostic = "ok", None
    step = 0

    def record(step, epoch):
        t = step / total
        acc, rep_acc, cos = evaluate(model, method, t, val)
        gate = 0.0 if method.kind in ("student_only", "kd") else method.schedule(t)
        row = {"step": step, "epoch": epoch, "t_fraction": t, "gate": gate,
               "student_weight": _student_weight(method, t), "dfg_lambda": method.dfg_lambda(t),
               "train_loss": window.mean("total"), "task_loss": window.mean("task"), "dfg_loss": window.mean("dfg"),
               "val_acc": acc, "replaced_val_acc": rep_acc, "grad_var": window.grad_var(),
               "teacher_evals": int(round(window.mean("teacher_evals")))}
        row.update({f"cos_block{l}": cos[l] for l in layers})
        rows.append(row)
        timings.append({"step": step, "mean_step_seconds": window.mean("seconds")})

    record(0, 0)
    try:
        for epoch in range(cfg.epochs):
            for batch in train.batches(cfg.batch_size, data_rng):
                t = step / total
                t0 = time.perf_counter()
                out = training_step(model, batch, method, t, gate_rng, label_smoothing=cfg.label_smoothing)
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                raw = np.concatenate([g.reshape(-1) for g in grads])
                clip_grad_norm(grads, cfg.clip_norm)
                max_post_clip = max(max_post_clip, math.sqrt(sum(float(np.sum(g * g)) for g in grads)))
                lr = cosine_lr(step, total, cfg.lr, cfg.min_lr)
                adamw_step([p.data for p in params], grads, state, lr, (cfg.beta1, cfg.beta2), cfg.adam_eps,
                           cfg.weight_decay)
                step += 1
                teacher_evals_total += out.teacher_evals
                window.add(raw, total=out.total_loss, task=out.task_loss, dfg=out.dfg_loss,
                           teacher_evals=out.teacher_evals, seconds=time.perf_counter() - t0)
                if step % eval_every == 0 or step == stop_at:
                    record(step, step // steps_per_epoch)
                    window = _Window()
                if step == stop_at:
                    break
            if step == stop_at:
                break
    except NumericError as exc:
        status = "diverged"
        diagnostic = {"step": step, "error": str(exc), **{k: v for k, v in exc.snapshot.items()}}
        log.warning("run diverged at step %d: %s", step, exc)

    final = rows[-1]
    summary = {
        "method": cfg.method,
        "schedule": method.schedule.name,
        "seed": cfg.seed,
        "status": status,
        "total_steps": total,
        "steps_completed": step,
        "teacher_val_acc": teacher_acc,
        "threshold": threshold,
        "steps_to_threshold": steps_to_threshold(rows, threshold),
        "final_val_acc": final["val_acc"],
        "final_replaced_val_acc": final["replaced_val_acc"],
        "final_cos": {str(l): final[f"cos_block{l}"] for l in layers},
        "teacher_evals_total": teacher_evals_total,
        "max_post_clip_norm": max_post_clip,
    }
    if diagnostic is not None:
        summary["diagnostic"] = diagnostic
    record_ = RunRecord(cfg, rows, summary, cfg.out_dir if persist else None, timings, model)
    if persist:
        persist_run(record_, model, layers)
    return record_


def persist_run(rec: RunRecord, model: MicroTransformer, layers):
    out = rec.out_dir
    os.makedirs(out, exist_ok=True)
    write_config(rec.config, out)
    write_metrics(os.path.join(out, "metrics.csv"), rec.rows, layers)
    with open(os.path.join(out, "timing.csv"), "w") as fh:
        fh.write("step,mean_step_seconds\n")
        for r in rec.timings:
            fh.write(f"{r['step']},{r['mean_step_seconds']:.6g}\n")
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(rec.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_model(os.path.join(out, "final.ckpt"), model, {"method": rec.config.method, "seed": rec.config.seed})


# -- grids -----------------------------------------------------------------------

DEFAULT_GRID = ("dcr_dfg", "dcr", "theseus", "theseus_gumbel", "student_only")


def _grid_worker(args):
    cfg, method = args
    teacher = load_model(cfg.teacher_path)
    rec = run_experiment(cfg.replace(method=method, out_dir=os.path.join(cfg.out_dir, method)),
                         teacher, float(teacher.meta["val_acc"]))
    return rec.summary


def run_grid(cfg: RunConfig, methods=DEFAULT_GRID, jobs: int = 1) -> list:
    """Run each method with the same seed and teacher; return summaries ranked
    by steps-to-threshold (never reaching it ranks last)."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    cfg = cfg.replace(teacher_path=teacher_path_for(cfg))
    ensure_teacher(cfg)
    write_config(cfg, cfg.out_dir)
    work = [(cfg, m) for m in methods]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(_grid_worker, work))
    else:
        summaries = [_grid_worker(w) for w in work]
    ranked = rank_summaries(summaries)
    write_ranking(os.path.join(cfg.out_dir, "ranking.csv"), ranked)
    return ranked


def rank_summaries(summaries) -> list:
    def key(s):
        steps = s["steps_to_threshold"]
        return (math.inf if steps is None else steps, -s["final_replaced_val_acc"])
    return sorted(summaries, key=key)


RANKING_FIELDS = ("rank", "method", "seed", "steps_to_threshold", "final_val_acc", "final_replaced_val_acc",
                  "mean_final_cos", "status")


def ranking_rows(ranked) -> list:
    rows = []
    for i, s in enumerate(ranked, start=1):
        cos = list(s["final_cos"].values())
        rows.append({"rank": i, "method": s["method"], "seed": s["seed"],
                     "steps_to_threshold": "never" if s["steps_to_threshold"] is None else s["steps_to_threshold"],
                     "final_val_acc": "%.9g" % s["final_val_acc"],
                     "final_replaced_val_acc": "%.9g" % s["final_replaced_val_acc"],
                     "mean_final_cos": "%.9g" % (sum(cos) / len(cos) if cos else 0.0),
                     "status": s["status"]})
    return rows


def write_ranking(path, ranked):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RANKING_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(ranking_rows(ranked))


def format_table(rows, fields) -> str:
    widths = {f: max(len(f), *(len(str(r[f])) for r in rows)) if rows else len(f) for f in fields}
    lines = ["  ".join(f.ljust(widths[f]) for f in fields)]
    lines += ["  ".join(str(r[f]).ljust(widths[f]) for f in fields) for r in rows]
    return "\n".join(lines)
