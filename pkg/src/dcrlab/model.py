"""Pre-norm micro transformer with replaceable attention sites.

Layers are numbered 1..depth. Each layer runs

    x_mid = x + attention_branch(LN1(x))
    x_out = x_mid + MLP(LN2(x_mid))

At a replaced site the attention branch is a mix of the frozen teacher
attention and a trainable student attention that both read the same
normalised input. Classification reads position 0 through a final LN and a
linear head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import ConfigError, DimensionError, ParameterError

MODES = ("teacher_only", "student_only", "dcr_blend", "theseus_hard", "theseus_soft")
GATED_MODES = ("dcr_blend", "theseus_hard", "theseus_soft")


@dataclass(frozen=True)
class ModelSpec:
    depth: int = 4
    width: int = 32
    heads: int = 4
    seq_len: int = 16
    replaced: tuple = (1, 2, 3, 4)
    num_classes: int = 8
    vocab_size: int = 36
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "replaced", tuple(sorted(set(int(i) for i in self.replaced))))
        for key in ("depth", "width", "heads", "seq_len", "num_classes", "vocab_size", "mlp_ratio"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be positive", key=key)
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}", key="heads")
        bad = [i for i in self.replaced if not 1 <= i <= self.depth]
        if bad:
            raise ConfigError(f"replaced layers {bad} outside 1..{self.depth}", key="replaced")


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def tensors(self):
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self):
        out = {"ln1_g": self.ln1_g, "ln1_b": self.ln1_b, "ln2_g": self.ln2_g, "ln2_b": self.ln2_b,
               "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
        out.update({f"attn.{k}": v for k, v in self.attn.tensors().items()})
        return out


@dataclass
class ReplacedSite:
    """Frozen teacher attention paired with a trainable student at one layer."""

    layer_index: int
    teacher: AttentionParams
    student: AttentionParams

    def student_parameters(self):
        return list(self.student.tensors().values())

    def teacher_parameters(self):
        return list(self.teacher.tensors().values())

    def student_size(self) -> int:
        return sum(p.size for p in self.student_parameters())


@dataclass
class BlockOutputs:
    residual_in: Tensor
    normalized: Tensor
    teacher_branch: Optional[Tensor]
    student_branch: Optional[Tensor]
    branch: Tensor
    residual_out: Tensor
    block_out: Tensor
    student_coef: Union[float, np.ndarray] = 0.0


@dataclass
class ForwardOutput:
    logits: Tensor
    blocks: dict = field(default_factory=dict)
    teacher_evals: int = 0


def kaiming_init(shape, fan_in: int, rng_seed) -> Tensor:
    """Draw i.i.d. N(0, 2/fan_in) entries; ``rng_seed`` is an int or a Generator."""
    if fan_in < 1:
        raise ParameterError(f"fan_in must be >= 1, got {fan_in}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=tuple(shape)))


def init_attention(width: int, rng, std: Optional[float] = None) -> AttentionParams:
    if std is None:
        return AttentionParams(*(kaiming_init((width, width), width, rng) for _ in range(4)))
    return AttentionParams(*(Tensor(rng.normal(0.0, std, (width, width))) for _ in range(4)))


def attention_forward(h: Tensor, params: AttentionParams, heads: int) -> Tensor:
    """Multi-head self-attention on ``[n, d]`` or ``[B, n, d]`` input."""
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
    if h.ndim != 3:
        raise DimensionError(f"attention expects [B, n, d], got {h.shape}")
    b, n, d = h.shape
    for name, w in params.tensors().items():
        if w.shape != (d, d):
            raise DimensionError(f"attention {name} has shape {w.shape}, expected {(d, d)}")
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(h @ params.wq), split(h @ params.wk), split(h @ params.wv)
    scores = ad.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh))
    mixed = ad.softmax_rows(scores) @ v
    out = mixed.transpose(0, 2, 1, 3).reshape(b, n, d) @ params.wo
    return out.reshape(n, d) if squeeze else out


def mlp_forward(h: Tensor, layer: LayerParams) -> Tensor:
    return ad.gelu(h @ layer.w1 + layer.b1) @ layer.w2 + layer.b2


def student_coefficient(mode: str, gate):
    """Weight on the student branch implied by ``mode`` and its gate value.

    ``dcr_blend`` gates carry the teacher weight alpha; the Theseus modes
    carry the student selection z (hard) or r (soft).
    """
    if mode == "teacher_only":
        return 0.0
    if mode == "student_only":
        return 1.0
    if mode not in GATED_MODES:
        raise ConfigError(f"unknown mode {mode!r}", key="mode")
    g = np.asarray(gate, dtype=np.float64)
    if np.any(g < 0.0) or np.any(g > 1.0) or not np.all(np.isfinite(g)):
        raise ParameterError(f"gate value {gate} outside [0, 1]")
    if mode == "theseus_hard" and not np.all((g == 0.0) | (g == 1.0)):
        raise ParameterError(f"hard gate must be 0 or 1, got {gate}")
    c = 1.0 - g if mode == "dcr_blend" else g
    return float(c) if c.ndim == 0 else c


def _weighted(t: Tensor, c) -> Tensor:
    if isinstance(c, np.ndarray):
        return ad.mul(t, Tensor(c.reshape(-1, *([1] * (t.ndim - 1)))))
    return ad.scale(t, c)


def block_forward(x: Tensor, layer: LayerParams, heads: int, site: Optional[ReplacedSite] = None,
                  gate_value=None, mode: str = "dcr_blend", need_teacher: bool = False,
                  need_student: bool = False, branch_override: Optional[Tensor] = None) -> BlockOutputs:
    h = ad.layer_norm(x, layer.ln1_g, layer.ln1_b)
    teacher = student = None
    if site is None:
        c = 0.0
        branch = attention_forward(h, layer.attn, heads)
    else:
        c = student_coefficient(mode, gate_value)
        c_arr = np.asarray(c)
        teacher_needed = need_teacher or mode == "teacher_only" or np.any(c_arr != 1.0)
        student_needed = need_student or mode != "teacher_only"
        if branch_override is not None:
            teacher_needed = need_teacher
            student_needed = need_student
        if teacher_needed:
            with no_grad():
                teacher = attention_forward(h, site.teacher, heads)
        if student_needed:
            student = attention_forward(h, site.student, heads)
        if branch_override is not None:
            if branch_override.shape != h.shape:
                raise DimensionError(f"branch override {branch_override.shape} != {h.shape}")
            branch = branch_override
        elif mode == "teacher_only":
            branch = teacher
        elif mode == "student_only":
            branch = student
        elif teacher is None:
            branch = _weighted(student, c)
        else:
            branch = _weighted(teacher, 1.0 - c_arr if isinstance(c, np.ndarray) else 1.0 - c) + _weighted(student, c)
    mid = x + branch
    out = mid + mlp_forward(ad.layer_norm(mid, layer.ln2_g, layer.ln2_b), layer)
    return BlockOutputs(x, h, teacher, student, branch, mid, out, c)


class MicroTransformer:
    """Backbone parameters plus one ``ReplacedSite`` per replaced layer."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        d, hidden = spec.width, spec.width * spec.mlp_ratio
        self.embed = Tensor(rng.normal(0.0, 1.0, (spec.vocab_size, d)))
        self.pos = Tensor(rng.normal(0.0, 1.0, (spec.seq_len, d)))
        self.layers = []
        for _ in range(spec.depth):
            self.layers.append(LayerParams(
                ln1_g=Tensor(np.ones(d)), ln1_b=Tensor(np.zeros(d)),
                attn=init_attention(d, rng, std=1.0 / math.sqrt(d)),
                ln2_g=Tensor(np.ones(d)), ln2_b=Tensor(np.zeros(d)),
                w1=Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, hidden))), b1=Tensor(np.zeros(hidden)),
                w2=Tensor(rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, d))), b2=Tensor(np.zeros(d)),
            ))
        self.lnf_g = Tensor(np.ones(d))
        self.lnf_b = Tensor(np.zeros(d))
        self.head_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, spec.num_classes)))
        self.head_b = Tensor(np.zeros(spec.num_classes))
        self.sites: dict = {}

    # -- parameter bookkeeping ------------------------------------------

    def backbone_tensors(self) -> dict:
        out = {"embed": self.embed, "pos": self.pos, "lnf_g": self.lnf_g, "lnf_b": self.lnf_b,
               "head_w": self.head_w, "head_b": self.head_b}
        for i, layer in enumerate(self.layers, start=1):
            out.update({f"layer{i}.{k}": v for k, v in layer.tensors().items()})
        return out

    def student_tensors(self) -> dict:
        return {f"student{l}.{k}": v for l, site in self.sites.items() for k, v in site.student.tensors().items()}

    def state_dict(self) -> dict:
        return {**self.backbone_tensors(), **self.student_tensors()}

    def student_parameters(self) -> list:
        return [p for site in self.sites.values() for p in site.student_parameters()]

    def teacher_parameters(self) -> list:
        return [p for site in self.sites.values() for p in site.teacher_parameters()]

    def trainable_parameters(self) -> list:
        return [p for p in self.state_dict().values() if p.requires_grad]

    def set_backbone_trainable(self, flag: bool):
        for p in self.backbone_tensors().values():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self):
        for p in self.state_dict().values():
            p.grad = None

    def attach_students(self, seed: int, layers=None):
        """Freeze the backbone and create cold-start students at ``layers``."""
        self.set_backbone_trainable(False)
        layers = self.spec.replaced if layers is None else layers
        d = self.spec.width
        self.sites = {}
        for l in layers:
            rng = np.random.default_rng([seed, l])
            student = init_attention(d, rng)
            for p in student.tensors().values():
                p.requires_grad = True
            self.sites[l] = ReplacedSite(l, self.layers[l - 1].attn, student)
        return self

    def copy(self) -> "MicroTransformer":
        clone = MicroTransformer.__new__(MicroTransformer)
        clone.spec = self.spec
        clone.load_state(self.state_dict(), strict=False)
        return clone

    def load_state(self, tensors: Mapping[str, np.ndarray], strict: bool = True):
        spec, d = self.spec, self.spec.width
        hidden = d * spec.mlp_ratio

        def get(name, shape):
            arr = tensors[name]
            arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
            if arr.shape != tuple(shape):
                raise DimensionError(f"checkpoint tensor {name} has shape {arr.shape}, expected {shape}")
            return Tensor(arr.copy())

        self.embed = get("embed", (spec.vocab_size, d))
        self.pos = get("pos", (spec.seq_len, d))
        self.lnf_g, self.lnf_b = get("lnf_g", (d,)), get("lnf_b", (d,))
        self.head_w = get("head_w", (d, spec.num_classes))
        self.head_b = get("head_b", (spec.num_classes,))
        self.layers = []
        for i in range(1, spec.depth + 1):
            p = f"layer{i}."
            self.layers.append(LayerParams(
                ln1_g=get(p + "ln1_g", (d,)), ln1_b=get(p + "ln1_b", (d,)),
                attn=AttentionParams(*(get(p + f"attn.{k}", (d, d)) for k in ("wq", "wk", "wv", "wo"))),
                ln2_g=get(p + "ln2_g", (d,)), ln2_b=get(p + "ln2_b", (d,)),
                w1=get(p + "w1", (d, hidden)), b1=get(p + "b1", (hidden,)),
                w2=get(p + "w2", (hidden, d)), b2=get(p + "b2", (d,)),
            ))
        self.sites = {}
        student_layers = sorted({int(k[len("student"):].split(".")[0]) for k in tensors if k.startswith("student")})
        for l in student_layers:
            student = AttentionParams(*(get(f"student{l}.{k}", (d, d)) for k in ("wq", "wk", "wv", "wo")))
            for t in student.tensors().values():
                t.requires_grad = True
            self.sites[l] = ReplacedSite(l, self.layers[l - 1].attn, student)
        if strict:
            known = set(self.state_dict())
            extra = sorted(set(tensors) - known)
            if extra:
                raise ConfigError(f"unexpected checkpoint tensors: {extra[:5]}")
        return self

    # -- forward ---------------------------------------------------------

    def embed_tokens(self, tokens) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != self.spec.seq_len:
            raise DimensionError(f"tokens must be [B, {self.spec.seq_len}], got {tokens.shape}")
        onehot = np.zeros(tokens.shape + (self.spec.vocab_size,))
        np.put_along_axis(onehot, tokens[..., None], 1.0, axis=-1)
        return Tensor(onehot) @ self.embed + self.pos

    def head(self, x: Tensor) -> Tensor:
        cls = x[:, 0, :]
        return ad.layer_norm(cls, self.lnf_g, self.lnf_b) @ self.head_w + self.head_b


def model_forward(model: MicroTransformer, tokens, gates: Optional[Mapping] = None,
                  mode: Union[str, Mapping[int, str]] = "dcr_blend", need_teacher: bool = False,
                  need_student: bool = False, branch_override: Optional[Mapping[int, Tensor]] = None
                  ) -> ForwardOutput:
    """Run the full network; ``gates`` maps each replaced layer to its gate value."""
    gates = gates or {}
    branch_override = branch_override or {}
    x = model.embed_tokens(tokens)
    blocks, teacher_evals = {}, 0
    for l, layer in enumerate(model.layers, start=1):
        site = model.sites.get(l)
        if site is None:
            x = block_forward(x, layer, model.spec.heads).block_out
            continue
        layer_mode = mode[l] if isinstance(mode, Mapping) else mode
        if layer_mode not in MODES:
            raise ConfigError(f"unknown mode {layer_mode!r}", key="mode")
        gate = gates.get(l)
        if layer_mode in GATED_MODES and gate is None:
            raise ConfigError(f"no gate supplied for replaced layer {l}", key="gates")
        out = block_forward(x, layer, model.spec.heads, site, gate, layer_mode,
                            need_teacher=need_teacher, need_student=need_student,
                            branch_override=branch_override.get(l))
        teacher_evals += out.teacher_branch is not None
        blocks[l] = out
        x = out.block_out
    return ForwardOutput(model.head(x), blocks, teacher_evals)


# -- checkpoint file ------------------------------------------------------
#
# Text format, one record per tensor:
#
#     dcrlab-checkpoint 1
#     meta <key> <value>            (zero or more)
#     tensor <name> <d1>x<d2>...    followed by one line of %.17g values, row-major
#     end
#
# %.17g round-trips every fp64 value exactly.

CHECKPOINT_MAGIC = "dcrlab-checkpoint 1"


def save_checkpoint(path, tensors: Mapping, meta: Optional[Mapping[str, str]] = None):
    lines = [CHECKPOINT_MAGIC]
    for k, v in (meta or {}).items():
        if any(ch.isspace() for ch in str(k)) or "\n" in str(v):
            raise ValueError(f"meta entry {k!r} cannot contain whitespace/newlines")
        lines.append(f"meta {k} {v}")
    for name in sorted(tensors):
        arr = tensors[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
        dims = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"tensor {name} {dims}")
        lines.append(" ".join("%.17g" % v for v in arr.reshape(-1)))
    lines.append("end")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a dcrlab checkpoint")
    tensors, meta, i = {}, {}, 1
    while i < len(lines):
        line = lines[i]
        if line == "end":
            return tensors, meta
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
            i += 1
        elif kind == "tensor":
            name, dims = rest.split(" ")
            shape = () if dims == "scalar" else tuple(int(s) for s in dims.split("x"))
            values = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
            tensors[name] = values.reshape(shape)
            i += 2
        else:
            raise ValueError(f"{path}:{i + 1}: unrecognised record {kind!r}")
    raise ValueError(f"{path}: missing end marker")


def spec_to_meta(spec: ModelSpec) -> dict:
    return {"depth": spec.depth, "width": spec.width, "heads": spec.heads, "seq_len": spec.seq_len,
            "replaced": ",".join(map(str, spec.replaced)) or "-", "num_classes": spec.num_classes,
            "vocab_size": spec.vocab_size, "mlp_ratio": spec.mlp_ratio}


def spec_from_meta(meta: Mapping[str, str]) -> ModelSpec:
    replaced = meta.get("replaced", "-")
    ints = {k: int(meta[k]) for k in ("depth", "width", "heads", "seq_len", "num_classes", "vocab_size", "mlp_ratio")}
    return ModelSpec(replaced=() if replaced == "-" else tuple(int(s) for s in replaced.split(",")), **ints)


def save_model(path, model: MicroTransformer, extra_meta: Optional[Mapping] = None):
    meta = {**spec_to_meta(model.spec), **(extra_meta or {})}
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path, spec: Optional[ModelSpec] = None) -> MicroTransformer:
    tensors, meta = load_checkpoint(path)
    spec = spec or spec_from_meta(meta)
    model = MicroTransformer.__new__(MicroTransformer)
    model.spec = spec
    model.load_state(tensors)
    model.set_backbone_trainable(False)
    model.meta = meta
    return model
