import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from faithvqa.explainer import (Explainer, ExplainerConfig, SourceLabeler, WordVectors,
                                sample_answer_embedding, shift_targets, source_labels,
                                source_loss, xe_loss)
from faithvqa.nncore import DTYPE
from faithvqa.toyworld import CATEGORIES, Scene, SceneObject, Vocabulary
from faithvqa.vqa import masked_softmax

V, D, H, A, Y = 3, 6, 5, 4, 11


def model(seed=0):
    return Explainer(ExplainerConfig(vocab_size=Y, num_answers=A, feature_dim=D, question_dim=H,
                                     word_dim=4, hidden=H, att_hidden=5, seed=seed))


def inputs(b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    vq = torch.rand(b, V, D, generator=g, dtype=DTYPE)
    a = torch.nn.functional.one_hot(torch.arange(b) % A, A).to(DTYPE)
    q = torch.randn(b, H, generator=g, dtype=DTYPE)
    return vq, a, q, torch.ones(b, V, dtype=torch.bool)


# -- answer sampling ---------------------------------------------------------

def test_answer_embedding_degenerate_and_argmax():
    assert torch.equal(sample_answer_embedding(torch.tensor([0., 0, 0, 1, 0]),
                                               np.random.default_rng(0)),
                       torch.tensor([0., 0, 0, 1, 0], dtype=DTYPE))
    out = sample_answer_embedding(torch.tensor([0.1, 0.7, 0.2]), mode="argmax")
    assert out.tolist() == [0, 1, 0]
    with pytest.raises(ValueError):
        sample_answer_embedding(torch.zeros(3), np.random.default_rng(0))


def test_answer_sampling_frequencies_within_three_sigma():
    p = torch.tensor([0.2, 0.5, 0.3], dtype=DTYPE)
    n = 10_000
    draws = sample_answer_embedding(p.expand(n, 3), np.random.default_rng(1))
    freq = draws.sum(0).numpy()
    sigma = np.sqrt(n * p.numpy() * (1 - p.numpy()))
    assert (np.abs(freq - n * p.numpy()) < 3 * sigma).all()
    # unnormalized sigmoid scores are rescaled first
    assert sample_answer_embedding(torch.tensor([0.0, 2.0]), mode="argmax").tolist() == [0, 1]


# -- fusion ------------------------------------------------------------------

def test_fuse_identity_and_annihilation():
    m = model()
    with torch.no_grad():
        for fc in (m.f_answer, m.f_question):
            fc.linear.weight.zero_()
            fc.linear.bias.fill_(1.0)
    vq, a, q, mask = inputs()
    fused = m.fuse(vq, a, q, mask)
    assert torch.allclose(fused.u, vq)
    assert torch.allclose(fused.u_bar, vq.mean(1))
    vq[0, 1] = 0
    assert torch.equal(m.fuse(vq, a, q, mask).u[0, 1], torch.zeros(D, dtype=DTYPE))
    with pytest.raises(ValueError):
        m.fuse(torch.rand(1, V, D + 1, dtype=DTYPE), a[:1], q[:1], mask[:1])


def test_fuse_gradient_wrt_question():
    m = model()
    vq, a, q, mask = inputs(1)
    q = q.requires_grad_(True)
    g = torch.autograd.grad((m.fuse(vq, a, q, mask).u ** 2).sum(), q)[0]
    fd = central_diff(lambda z: (m.fuse(vq, a, z, mask).u ** 2).sum(), q.detach())
    assert rel_err(g, fd) < 1e-5


def test_unattended_object_cannot_influence_fusion():
    m = model()
    feats = torch.rand(1, V, D, dtype=DTYPE)
    alpha = torch.tensor([[0.6, 0.4, 0.0]], dtype=DTYPE)
    _, a, q, mask = inputs(1)
    u1 = m.fuse(alpha[..., None] * feats, a, q, mask).u
    feats[0, 2] += torch.rand(D, dtype=DTYPE) * 5
    u2 = m.fuse(alpha[..., None] * feats, a, q, mask).u
    assert torch.equal(u1, u2)


# -- attention and source gate -----------------------------------------------

def test_attention_symmetry_and_single_object():
    m = model()
    vq, a, q, mask = inputs(1)
    vq[:] = vq[:, :1]
    fused = m.fuse(vq, a, q, mask)
    alpha = m.attend_step(fused, torch.randn(1, H, dtype=DTYPE))
    assert torch.allclose(alpha, torch.full((1, V), 1 / V, dtype=DTYPE))
    one = m.fuse(vq[:, :1], a, q, mask[:, :1])
    assert m.attend_step(one, torch.randn(1, H, dtype=DTYPE)).tolist() == [[1.0]]


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.integers(0, 5),
       st.floats(0.01, 3))
def test_softmax_monotone_in_own_score(scores, k, bump):
    k %= len(scores)
    s = torch.tensor([scores], dtype=DTYPE)
    mask = torch.ones_like(s, dtype=torch.bool)
    before = masked_softmax(s, mask)[0, k]
    s[0, k] += bump
    assert masked_softmax(s, mask)[0, k] > before


def test_source_gate_zero_weights_and_bounds():
    m = model()
    with torch.no_grad():
        m.source.linear.weight.zero_()
        m.source.linear.bias.zero_()
    s = m.identify_source(torch.randn(3, H, dtype=DTYPE), torch.randn(3, D, dtype=DTYPE))
    assert torch.equal(s, torch.full((3, 2), 0.5, dtype=DTYPE))
    m = model(1)
    s = m.identify_source(10 * torch.randn(50, H, dtype=DTYPE), torch.randn(50, D, dtype=DTYPE))
    assert ((s > 0) & (s < 1)).all()


def test_source_gate_gradient():
    m = model()
    h1, ub = torch.randn(1, H, dtype=DTYPE), torch.randn(1, D, dtype=DTYPE)
    w = torch.tensor([[0.3, -1.1]], dtype=DTYPE)
    x = h1.clone().requires_grad_(True)
    g = torch.autograd.grad((m.identify_source(x, ub) * w).sum(), x)[0]
    fd = central_diff(lambda z: (m.identify_source(z, ub) * w).sum(), h1)
    assert rel_err(g, fd) < 1e-5


def test_language_step_gating():
    m = model()
    state = (torch.randn(1, H, dtype=DTYPE), torch.randn(1, H, dtype=DTYPE))
    h1, u = torch.randn(1, H, dtype=DTYPE), torch.randn(1, D, dtype=DTYPE)
    visual_only = torch.tensor([[0.0, 1.0]], dtype=DTYPE)
    _, lp1 = m.language_step(h1, u, visual_only, state)
    _, lp2 = m.language_step(h1 + 3.0, u, visual_only, state)
    assert torch.equal(lp1, lp2)
    linguistic_only = torch.tensor([[1.0, 0.0]], dtype=DTYPE)
    _, lp3 = m.language_step(h1, u, linguistic_only, state)
    _, lp4 = m.language_step(h1, u - 2.0, linguistic_only, state)
    assert torch.equal(lp3, lp4)
    assert abs(lp1.exp().sum().item() - 1) < 1e-9


# -- sequences ---------------------------------------------------------------

def test_teacher_forcing_is_causal_and_normalized():
    m = model()
    vq, a, q, mask = inputs()
    fused = m.fuse(vq, a, q, mask)
    inp, tgt, tm = shift_targets([[4, 5, 6, 7], [8, 9]], bos_id=1, eos_id=2)
    tf = m.teacher_forced(fused, inp, tgt, tm)
    inp2 = inp.clone()
    inp2[0, 3] = 10  # changes step 3 onward only
    tf2 = m.teacher_forced(fused, inp2, tgt, tm)
    assert torch.equal(tf.log_probs[0, :3], tf2.log_probs[0, :3])
    assert not torch.equal(tf.log_probs[0, 3], tf2.log_probs[0, 3])
    assert torch.allclose(tf.log_probs.exp().sum(-1), torch.ones(2, 5, dtype=DTYPE), atol=1e-9)
    assert torch.allclose(tf.alpha.sum(-1), torch.ones(2, 5, dtype=DTYPE), atol=1e-9)
    assert (tf.gold_logp[1, 3:] == 0).all()


def test_shift_targets():
    inp, tgt, mask = shift_targets([[5, 6]], bos_id=1, eos_id=2)
    assert inp.tolist() == [[1, 5, 6]] and tgt.tolist() == [[5, 6, 2]]
    assert mask.all()


def test_decode_bounds_and_determinism():
    m = model()
    vq, a, q, mask = inputs()
    fused = m.fuse(vq, a, q, mask)
    out1 = m.decode(fused, bos_id=1, eos_id=2, max_len=4)
    out2 = m.decode(fused, bos_id=1, eos_id=2, max_len=4)
    for o1, o2 in zip(out1, out2):
        assert o1.tokens == o2.tokens and len(o1.tokens) <= 4
        assert len(o1.steps) in (len(o1.tokens), len(o1.tokens) + 1)
        for s in o1.steps:
            assert abs(s.alpha.sum() - 1) < 1e-9 and abs(s.word_dist.sum() - 1) < 1e-9
            assert 0 < s.s[0] < 1 and 0 < s.s[1] < 1
    sampled = m.decode(fused, 1, 2, "sample", 4, np.random.default_rng(0))
    assert all(len(o.tokens) <= 4 for o in sampled)
    with pytest.raises(ValueError):
        m.decode(fused, 1, 2, max_len=0)


def test_loss_arithmetic():
    assert xe_loss(torch.zeros(1, 4, dtype=DTYPE)).item() == 0.0
    T = 5
    uniform = torch.full((1, T), -math.log(Y), dtype=DTYPE)
    assert abs(xe_loss(uniform).item() - T * math.log(Y)) < 1e-12
    ls = source_loss(torch.full((1, 1, 2), 0.5, dtype=DTYPE), torch.tensor([[[1.0, 0.0]]]))
    assert abs(ls.item() - 1.3862943611198906) < 1e-12
    # epsilon clamp keeps log(0) finite
    assert torch.isfinite(source_loss(torch.tensor([[[0.0, 1.0]]], dtype=DTYPE),
                                      torch.tensor([[[1.0, 0.0]]]))).all()


# -- source labels -------------------------------------------------------------

def _scene(*cats):
    return Scene(0, tuple(SceneObject(i, CATEGORIES.index(c), (0, 0), ((i, 0),), (1.0,))
                          for i, c in enumerate(cats)))


def test_source_labels_rules():
    vocab = Vocabulary.default()
    vec = WordVectors.default(vocab)
    toks = vocab.encode(["cube", "the", "cubes", "sphere"])
    lab = source_labels(toks, _scene("cube"), vocab, vec, CATEGORIES)
    assert lab[:, 1].tolist() == [1.0, 0.0, 1.0, 0.0]  # sphere absent from the scene
    assert (lab.sum(1) == 1).all()


def test_source_label_threshold_is_inclusive():
    vocab = Vocabulary.default()
    vec = WordVectors.default(vocab)
    e0, e1 = np.eye(48)[0], np.eye(48)[1]
    vec.table["cube"] = e0
    vec.table["red"] = 0.6 * e0 + 0.8 * e1  # cosine exactly 0.6
    vec.table["blue"] = 0.59 * e0 + np.sqrt(1 - 0.59 ** 2) * e1
    lab = SourceLabeler(vocab, vec, CATEGORIES, 0.6).labels(vocab.encode(["red", "blue"]),
                                                             _scene("cube"))
    assert lab[:, 1].tolist() == [1.0, 0.0]


def test_word_vector_file(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("cube 1 0\nsphere 0 1\n")
    wv = WordVectors.load(p)
    assert wv.cosine("cube", "sphere") == 0.0
    with pytest.raises(KeyError):
        wv.vector("cone")
    p.write_text("cube 1 0\nsphere 0 1 2\n")
    with pytest.raises(ValueError, match="inconsistent"):
        WordVectors.load(p)


def parameter_fd_errors(module, loss_fn, per_tensor=3, eps=1e-5, seed=0):
    """Worst autograd vs central-difference error on sampled entries of each tensor.

    Errors are relative to the tensor's largest gradient entry, floored at
    1e-4 so tensors whose gradient is analytically zero get an absolute check.
    """
    rng = np.random.default_rng(seed)
    module.zero_grad()
    loss_fn().backward()
    worst = {}
    for name, p in module.named_parameters():
        flat = p.data.view(-1)
        idx = rng.choice(flat.numel(), min(per_tensor, flat.numel()), replace=False)
        auto, fd = [], []
        for i in idx:
            old = flat[i].item()
            flat[i] = old + eps
            hi = loss_fn().item()
            flat[i] = old - eps
            lo = loss_fn().item()
            flat[i] = old
            auto.append(p.grad.view(-1)[i].item())
            fd.append((hi - lo) / (2 * eps))
        scale = max(p.grad.abs().max().item(), 1e-4)
        worst[name] = float(np.abs(np.subtract(auto, fd)).max() / scale)
    module.zero_grad()
    return worst


def explainer_loss_fn(m, seed=0):
    """XE + source loss through the full path, plus a term on random fused features.

    Fusion multiplies three small factors, so at initialization the objects
    barely differ and attention gradients sit near the finite-difference noise
    floor; the second term drives the decoder directly to keep them measurable.
    """
    from faithvqa.explainer import FusedFeatures
    vq, a, q, mask = inputs(seed=seed)
    inp, tgt, tm = shift_targets([[4, 5, 6, 7], [8, 9]], bos_id=1, eos_id=2)
    g = torch.Generator().manual_seed(seed)
    labels = (torch.rand(2, inp.shape[1], 2, generator=g) > 0.5).to(DTYPE)
    u = torch.randn(2, V, D, generator=g, dtype=DTYPE)
    direct = FusedFeatures(u, u.mean(1), mask)

    def loss():
        total = 0.0
        for fused in (m.fuse(vq, a, q, mask), direct):
            tf = m.teacher_forced(fused, inp, tgt, tm)
            total = total + (xe_loss(tf.gold_logp, tf.mask)
                             + source_loss(tf.s, labels, tf.mask)).sum()
        return total
    return loss


def test_every_explainer_parameter_gradient():
    m = model()
    errs = parameter_fd_errors(m, explainer_loss_fn(m))
    assert max(errs.values()) < 1e-5, errs
