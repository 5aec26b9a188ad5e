import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcrlab import autodiff as ad
from dcrlab.autodiff import Tensor, finite_diff_check
from dcrlab.errors import ConfigError, DimensionError, ParameterError
from dcrlab.model import (AttentionParams, MicroTransformer, ModelSpec, attention_forward, block_forward,
                          kaiming_init, load_model, mlp_forward, model_forward, save_model)

SPEC = ModelSpec()


def small_model(seed=0, replaced=(1, 2, 3, 4)):
    return MicroTransformer(ModelSpec(replaced=replaced), seed=seed).attach_students(seed + 100)


def tokens(n=3, seed=0):
    return np.random.default_rng(seed).integers(0, SPEC.vocab_size, (n, SPEC.seq_len))


def reference_attention(h, p: AttentionParams, heads):
    """Per-head loop over plain numpy arrays."""
    n, d = h.shape
    dh = d // heads
    q, k, v = h @ p.wq.data, h @ p.wk.data, h @ p.wv.data
    out = np.zeros((n, d))
    for i in range(heads):
        sl = slice(i * dh, (i + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        out[:, sl] = w @ v[:, sl]
    return out @ p.wo.data


def np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


# -- spec and init -----------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec(width=30, heads=4)
    with pytest.raises(ConfigError):
        ModelSpec(replaced=(0,))
    with pytest.raises(ConfigError):
        ModelSpec(depth=0)


def test_kaiming_std_and_determinism():
    t = kaiming_init((100, 100), 4, 7)
    sigma = math.sqrt(0.5)
    se = sigma / math.sqrt(2 * t.size)
    assert abs(t.data.std() - sigma) <= 3 * se
    assert np.array_equal(t.data, kaiming_init((100, 100), 4, 7).data)
    small = kaiming_init((4, 4), 4, 7).data.std()
    assert 0.5 * sigma <= small <= 1.5 * sigma


def test_kaiming_shrinks_with_fan_in():
    assert kaiming_init((50, 50), 1000, 0).data.std() < kaiming_init((50, 50), 10, 0).data.std()


def test_kaiming_rejects_zero_fan_in():
    with pytest.raises(ParameterError):
        kaiming_init((2, 2), 0, 0)


# -- attention ---------------------------------------------------------------------


def test_attention_single_token_is_projected_value():
    rng = np.random.default_rng(0)
    p = AttentionParams(*(Tensor(rng.normal(size=(8, 8))) for _ in range(4)))
    h = rng.normal(size=(1, 8))
    out = attention_forward(Tensor(h), p, 2).data
    assert np.allclose(out, h @ p.wv.data @ p.wo.data, atol=1e-12)


def test_attention_zero_params_zero_output():
    p = AttentionParams(*(Tensor(np.zeros((8, 8))) for _ in range(4)))
    out = attention_forward(Tensor(np.random.default_rng(0).normal(size=(5, 8))), p, 2).data
    assert np.array_equal(out, np.zeros((5, 8)))


@pytest.mark.parametrize("seed", range(5))
def test_attention_matches_reference(seed):
    rng = np.random.default_rng(seed)
    p = AttentionParams(*(Tensor(rng.normal(0, 0.3, (32, 32))) for _ in range(4)))
    h = rng.normal(size=(16, 32))
    assert np.allclose(attention_forward(Tensor(h), p, 4).data, reference_attention(h, p, 4), atol=1e-10)


def test_attention_shape_mismatch():
    p = AttentionParams(*(Tensor(np.zeros((8, 8))) for _ in range(4)))
    with pytest.raises(DimensionError):
        attention_forward(Tensor(np.zeros((3, 6))), p, 2)


# -- blocks ----------------------------------------------------------------------------


def _site_inputs(seed=0):
    model = small_model(seed)
    x = model.embed_tokens(tokens(2, seed))
    return model, x, model.layers[0], model.sites[1]


def test_block_alpha_one_is_teacher():
    model, x, layer, site = _site_inputs()
    blend = block_forward(x, layer, 4, site, 1.0, "dcr_blend")
    teacher = block_forward(x, layer, 4, site, None, "teacher_only")
    assert np.array_equal(blend.block_out.data, teacher.block_out.data)


def test_block_alpha_zero_is_student_and_skips_teacher():
    model, x, layer, site = _site_inputs()
    blend = block_forward(x, layer, 4, site, 0.0, "dcr_blend")
    student = block_forward(x, layer, 4, site, None, "student_only")
    assert blend.teacher_branch is None
    assert np.array_equal(blend.block_out.data, student.block_out.data)


def test_block_half_blend_is_convex_mix():
    model, x, layer, site = _site_inputs()
    out = block_forward(x, layer, 4, site, 0.5, "dcr_blend", need_teacher=True, need_student=True)
    u, v = out.teacher_branch.data, out.student_branch.data
    assert np.allclose(out.branch.data, 0.5 * u + 0.5 * v, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 1.0))
def test_residual_identity(alpha):
    model, x, layer, site = _site_inputs()
    out = block_forward(x, layer, 4, site, alpha, "dcr_blend")
    assert np.array_equal(out.residual_out.data - out.residual_in.data, (x + out.branch).data - x.data)
    assert np.allclose(out.residual_out.data - out.residual_in.data, out.branch.data, atol=1e-13)


@pytest.mark.parametrize("gate", [-0.1, 1.5])
def test_block_gate_out_of_range(gate):
    model, x, layer, site = _site_inputs()
    with pytest.raises(ParameterError):
        block_forward(x, layer, 4, site, gate, "dcr_blend")


def test_hard_gate_must_be_binary():
    model, x, layer, site = _site_inputs()
    with pytest.raises(ParameterError):
        block_forward(x, layer, 4, site, 0.5, "theseus_hard")


def test_teacher_and_student_shapes_match():
    model, x, layer, site = _site_inputs()
    out = block_forward(x, layer, 4, site, 0.3, "dcr_blend", need_teacher=True, need_student=True)
    assert out.teacher_branch.shape == out.student_branch.shape == x.shape


# -- full model --------------------------------------------------------------------------


def test_logits_shape_and_blocks_retained():
    model = small_model()
    fwd = model_forward(model, tokens(5), {l: 0.4 for l in model.sites})
    assert fwd.logits.shape == (5, SPEC.num_classes)
    assert sorted(fwd.blocks) == [1, 2, 3, 4]


def test_missing_gate_is_config_error():
    model = small_model()
    with pytest.raises(ConfigError):
        model_forward(model, tokens(), {1: 0.5}, "dcr_blend")


def test_alpha_one_bitwise_equals_teacher_only():
    model = small_model()
    a = model_forward(model, tokens(), {l: 1.0 for l in model.sites}, "dcr_blend").logits.data
    b = model_forward(model, tokens(), mode="teacher_only").logits.data
    assert np.array_equal(a, b)


def test_alpha_zero_equals_student_only():
    model = small_model()
    a = model_forward(model, tokens(), {l: 0.0 for l in model.sites}, "dcr_blend").logits.data
    b = model_forward(model, tokens(), mode="student_only").logits.data
    assert np.array_equal(a, b)


def test_empty_replaced_set_is_pretrained_forward():
    base = MicroTransformer(ModelSpec(replaced=()), seed=3)
    with_sites = MicroTransformer(ModelSpec(), seed=3).attach_students(0)
    a = model_forward(base, tokens()).logits.data
    b = model_forward(with_sites, tokens(), mode="teacher_only").logits.data
    assert np.array_equal(a, b)


def test_blend_matches_hand_rolled_loop():
    model = small_model(2)
    tok = tokens(2, 2)
    alpha = 0.3
    got = model_forward(model, tok, {l: alpha for l in model.sites}).logits.data
    onehot = np.eye(SPEC.vocab_size)[tok]
    x = onehot @ model.embed.data + model.pos.data
    for l, layer in enumerate(model.layers, start=1):
        h = np_layer_norm(x, layer.ln1_g.data, layer.ln1_b.data)
        site = model.sites[l]
        t = np.stack([reference_attention(hb, site.teacher, 4) for hb in h])
        s = np.stack([reference_attention(hb, site.student, 4) for hb in h])
        x = x + alpha * t + (1 - alpha) * s
        m = np_layer_norm(x, layer.ln2_g.data, layer.ln2_b.data)
        pre = m @ layer.w1.data + layer.b1.data
        act = 0.5 * pre * (1 + np.tanh(math.sqrt(2 / math.pi) * (pre + 0.044715 * pre**3)))
        x = x + act @ layer.w2.data + layer.b2.data
    cls = np_layer_norm(x[:, 0, :], model.lnf_g.data, model.lnf_b.data)
    expected = cls @ model.head_w.data + model.head_b.data
    assert np.allclose(got, expected, atol=1e-12, rtol=0)


def test_attach_students_freezes_backbone():
    model = small_model()
    assert all(not p.requires_grad for p in model.backbone_tensors().values())
    assert all(p.requires_grad for p in model.student_parameters())
    assert all(not p.requires_grad for p in model.teacher_parameters())


def test_teacher_grads_absent_after_backward():
    model = small_model()
    fwd = model_forward(model, tokens(), {l: 0.5 for l in model.sites})
    ad.cross_entropy(fwd.logits, np.zeros(3, dtype=int)).backward()
    assert all(p.grad is None for p in model.teacher_parameters())
    assert all(p.grad is not None for p in model.student_parameters())


@pytest.mark.parametrize("seed", range(10))
def test_full_model_loss_gradient(seed):
    model = small_model(seed)
    tok, labels = tokens(2, seed), np.arange(2) % SPEC.num_classes
    site = model.sites[2]
    # student-only path: no detached teacher branch anywhere downstream
    target = site.student.wq

    def f(w):
        site.student.wq = w
        out = model_forward(model, tok, mode="student_only").logits
        return ad.cross_entropy(out, labels, 0.1)

    rng = np.random.default_rng(seed)
    coords = rng.choice(32 * 32, 12, replace=False)
    err = finite_diff_check(f, Tensor(target.data.copy(), requires_grad=True), coords=coords)
    site.student.wq = target
    assert err <= 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_blend_gradient_at_last_site(seed):
    model = small_model(seed)
    tok, labels = tokens(2, seed), np.arange(2) % SPEC.num_classes
    site = model.sites[4]
    target = site.student.wv

    def f(w):
        site.student.wv = w
        out = model_forward(model, tok, {l: 0.3 for l in model.sites}).logits
        return ad.cross_entropy(out, labels, 0.1)

    rng = np.random.default_rng(seed)
    coords = rng.choice(32 * 32, 12, replace=False)
    err = finite_diff_check(f, Tensor(target.data.copy(), requires_grad=True), coords=coords)
    site.student.wv = target
    assert err <= 1e-5


def test_checkpoint_round_trip(tmp_path):
    model = small_model(4)
    path = tmp_path / "m.ckpt"
    save_model(path, model, {"note": "x"})
    loaded = load_model(path)
    assert loaded.spec == model.spec
    assert loaded.meta["note"] == "x"
    for k, v in model.state_dict().items():
        assert np.array_equal(v.data, loaded.state_dict()[k].data)
    a = model_forward(model, tokens(), {l: 0.2 for l in model.sites}).logits.data
    b = model_forward(loaded, tokens(), {l: 0.2 for l in loaded.sites}).logits.data
    assert np.array_equal(a, b)


def test_copy_is_independent():
    model = small_model()
    clone = model.copy()
    clone.sites[1].student.wq.data += 1.0
    assert not np.array_equal(clone.sites[1].student.wq.data, model.sites[1].student.wq.data)


def test_mlp_untouched_by_replacement():
    model = small_model()
    h = Tensor(np.random.default_rng(0).normal(size=(3, 32)))
    assert np.array_equal(mlp_forward(h, model.layers[0]).data, mlp_forward(h, model.layers[0]).data)
