"""Textual explanation decoder conditioned on the frozen VQA model.

Two stacked LSTMs: the first attends over QA-fused object features, a source
gate (two independent sigmoids) decides how much the next word leans on
the attention-LSTM state versus the attended visual feature, and the second
LSTM predicts the word.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .nncore import DTYPE, FC, LSTMCell
from .vqa import masked_softmax

EPS = 1e-12


@dataclass(frozen=True)
class ExplainerConfig:
    vocab_size: int
    num_answers: int
    feature_dim: int = 64
    question_dim: int = 64
    word_dim: int = 32
    hidden: int = 64
    att_hidden: int = 64
    seed: int = 0


@dataclass
class FusedFeatures:
    u: torch.Tensor  # [B, V, D]
    u_bar: torch.Tensor  # [B, D], mean over real objects
    mask: torch.Tensor  # [B, V]


@dataclass
class DecodeStep:
    t: int
    token: int
    alpha: np.ndarray
    s: tuple
    word_dist: np.ndarray
    h1: np.ndarray
    h2: np.ndarray


@dataclass
class ExplanationOutput:
    tokens: list
    steps: list
    links: set = field(default_factory=set)  # {(word index, object_id)}

    @property
    def alpha(self) -> np.ndarray:
        return np.array([st.alpha for st in self.steps])

    @property
    def source(self) -> np.ndarray:
        return np.array([st.s for st in self.steps])


@dataclass
class TeacherForced:
    log_probs: torch.Tensor  # [B, T, |Y|]
    gold_logp: torch.Tensor  # [B, T], zero at padding
    s: torch.Tensor  # [B, T, 2]
    alpha: torch.Tensor  # [B, T, V]
    mask: torch.Tensor  # [B, T]

    def sequence_logp(self) -> torch.Tensor:
        return self.gold_logp.sum(1)


def sample_answer_embedding(p, rng: np.random.Generator | None = None, mode: str = "sample",
                            num_answers: int | None = None) -> torch.Tensor:
    """One-hot answer drawn from the rescaled sigmoid scores (row-wise)."""
    p = torch.as_tensor(p, dtype=DTYPE).detach()
    squeeze = p.dim() == 1
    p = p.reshape(-1, p.shape[-1])
    totals = p.sum(-1, keepdim=True)
    if bool((totals <= 0).any()) or bool((p < 0).any()):
        raise ValueError("answer scores must be nonnegative with a positive sum")
    probs = (p / totals).numpy()
    if mode == "argmax":
        idx = probs.argmax(-1)
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        idx = np.array([rng.choice(len(row), p=row / row.sum()) for row in probs])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    out = nn.functional.one_hot(torch.as_tensor(idx), num_answers or p.shape[-1]).to(DTYPE)
    return out[0] if squeeze else out


class Explainer(nn.Module):
    def __init__(self, cfg: ExplainerConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        d, h = cfg.feature_dim, cfg.hidden
        self.f_answer = FC(cfg.num_answers, d, "leaky_relu", "f_answer")
        self.f_question = FC(cfg.question_dim, d, "leaky_relu", "f_question")
        self.embed = nn.Embedding(cfg.vocab_size, cfg.word_dim, dtype=DTYPE)
        self.att_lstm = LSTMCell(h + d + cfg.word_dim, h)
        self.att_u = FC(d, cfg.att_hidden, "identity", "att_u")
        self.att_h = FC(h, cfg.att_hidden, "identity", "att_h")
        self.att_out = FC(cfg.att_hidden, 1, "identity", "att_out")
        self.source = FC(h + d, 2, "sigmoid", "source")
        self.lang_lstm = LSTMCell(h + d, h)
        self.word_out = FC(h, cfg.vocab_size, "identity", "word_out")

    # -- single pieces -------------------------------------------------------

    def fuse(self, vq, a_s, q, mask) -> FusedFeatures:
        if vq.shape[-1] != self.cfg.feature_dim:
            raise ValueError(f"fuse: feature dim {vq.shape[-1]} != {self.cfg.feature_dim}")
        u = vq * self.f_answer(a_s)[:, None, :] * self.f_question(q)[:, None, :]
        m = mask[..., None].to(DTYPE)
        u_bar = (u * m).sum(1) / m.sum(1).clamp_min(1.0)
        return FusedFeatures(u, u_bar, mask)

    def attend_step(self, fused: FusedFeatures, h1, u_proj=None):
        if u_proj is None:
            u_proj = self.att_u(fused.u)
        scores = self.att_out(torch.tanh(u_proj + self.att_h(h1)[:, None, :])).squeeze(-1)
        return masked_softmax(scores, fused.mask)

    def identify_source(self, h1, u_bar):
        return self.source(torch.cat([h1, u_bar], -1))

    def language_step(self, h1, u_att, s, state2):
        """Source-gated input ``[h1 * s0, u_att * s1]`` into the language LSTM."""
        x2 = torch.cat([h1 * s[:, :1], u_att * s[:, 1:]], -1)
        h2, c2 = self.lang_lstm(x2, state2)
        return (h2, c2), torch.log_softmax(self.word_out(h2), -1)

    def init_state(self, batch: int):
        z = torch.zeros(batch, self.cfg.hidden, dtype=DTYPE)
        return (z, z), (z, z)

    def step(self, fused: FusedFeatures, prev_tokens, state1, state2, u_proj=None):
        x1 = torch.cat([state2[0], fused.u_bar, self.embed(prev_tokens)], -1)
        state1 = self.att_lstm(x1, state1)
        h1 = state1[0]
        alpha = self.attend_step(fused, h1, u_proj)
        s = self.identify_source(h1, fused.u_bar)
        u_att = (alpha[..., None] * fused.u).sum(1)
        state2, log_probs = self.language_step(h1, u_att, s, state2)
        return state1, state2, alpha, s, log_probs

    # -- whole sequences -----------------------------------------------------

    def teacher_forced(self, fused: FusedFeatures, inputs, targets, tmask) -> TeacherForced:
        """Run on gold prefixes: step t sees ``inputs[:, t]`` and scores ``targets[:, t]``."""
        b, steps = inputs.shape
        state1, state2 = self.init_state(b)
        u_proj = self.att_u(fused.u)
        lps, ss, alphas = [], [], []
        for t in range(steps):
            state1, state2, alpha, s, lp = self.step(fused, inputs[:, t], state1, state2, u_proj)
            lps.append(lp)
            ss.append(s)
            alphas.append(alpha)
        log_probs = torch.stack(lps, 1)
        gold = log_probs.gather(2, targets[..., None]).squeeze(-1) * tmask.to(DTYPE)
        return TeacherForced(log_probs, gold, torch.stack(ss, 1), torch.stack(alphas, 1), tmask)

    @torch.no_grad()
    def decode(self, fused: FusedFeatures, bos_id: int, eos_id: int, mode: str = "greedy",
               max_len: int = 20, rng: np.random.Generator | None = None) -> list:
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        if mode not in ("greedy", "sample"):
            raise ValueError(f"unknown decode mode {mode!r}")
        b = fused.u.shape[0]
        state1, state2 = self.init_state(b)
        u_proj = self.att_u(fused.u)
        prev = torch.full((b,), bos_id, dtype=torch.long)
        outs = [ExplanationOutput([], []) for _ in range(b)]
        done = np.zeros(b, dtype=bool)
        for t in range(max_len):
            state1, state2, alpha, s, lp = self.step(fused, prev, state1, state2, u_proj)
            if mode == "greedy":
                nxt = lp.argmax(-1)
            else:
                probs = lp.exp().numpy()
                nxt = torch.as_tensor([rng.choice(len(r), p=r / r.sum()) for r in probs])
            for i in np.flatnonzero(~done):
                nv = int(fused.mask[i].sum())
                outs[i].steps.append(DecodeStep(
                    t, int(nxt[i]), alpha[i, :nv].numpy().copy(),
                    (float(s[i, 0]), float(s[i, 1])), lp[i].exp().numpy().copy(),
                    state1[0][i].numpy().copy(), state2[0][i].numpy().copy()))
                if int(nxt[i]) == eos_id:
                    done[i] = True
                else:
                    outs[i].tokens.append(int(nxt[i]))
            if done.all():
                break
            prev = nxt
        return outs


def shift_targets(seqs, bos_id: int, eos_id: int, pad_id: int = 0):
    """Gold sequences -> (inputs, targets, mask) with <bos> prepended and <eos> appended."""
    steps = max(len(s) for s in seqs) + 1
    inputs = torch.full((len(seqs), steps), pad_id, dtype=torch.long)
    targets = torch.full((len(seqs), steps), pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), steps), dtype=torch.bool)
    for i, s in enumerate(seqs):
        s = list(s)
        inputs[i, :len(s) + 1] = torch.as_tensor([bos_id] + s)
        targets[i, :len(s) + 1] = torch.as_tensor(s + [eos_id])
        mask[i, :len(s) + 1] = True
    return inputs, targets, mask


def xe_loss(gold_logp, mask=None) -> torch.Tensor:
    """Per-sequence negative log-likelihood of the gold tokens, shape [B]."""
    if mask is not None:
        gold_logp = gold_logp * mask.to(gold_logp.dtype)
    return -gold_logp.sum(-1)


def source_loss(s, labels, mask=None) -> torch.Tensor:
    """Binary cross-entropy on both gate outputs, summed over steps; shape [B]."""
    s = s.clamp(EPS, 1 - EPS)
    labels = torch.as_tensor(labels, dtype=s.dtype)
    per_step = -(labels * torch.log(s) + (1 - labels) * torch.log(1 - s)).sum(-1)
    if mask is not None:
        per_step = per_step * mask.to(s.dtype)
    return per_step.sum(-1)


class WordVectors:
    """Token embedding table used only to derive source-identifier labels."""

    def __init__(self, table: dict):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}

    @classmethod
    def default(cls, vocab, dim: int = 48, seed: int = 0, plural_noise: float = 0.3):
        """Random directions, with each plural noun kept close to its singular."""
        rng = np.random.default_rng(seed)
        table = {tok: rng.normal(size=dim) for tok in vocab.tokens}
        for tok in vocab.tokens:
            if tok.endswith("s") and tok[:-1] in table and tok in vocab.nouns:
                table[tok] = table[tok[:-1]] + plural_noise * rng.normal(size=dim)
        return cls(table)

    @classmethod
    def load(cls, path):
        """Text format: one ``token v1 ... vE`` line per word."""
        table = {}
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                parts = line.split()
                if not parts:
                    continue
                try:
                    table[parts[0]] = [float(x) for x in parts[1:]]
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric vector entry") from None
        dims = {len(v) for v in table.values()}
        if len(dims) != 1:
            raise ValueError(f"{path}: inconsistent vector dimensions {sorted(dims)}")
        return cls(table)

    def vector(self, token: str) -> np.ndarray:
        try:
            return self.table[token]
        except KeyError:
            raise KeyError(f"no embedding for token {token!r}") from None

    def cosine(self, a: str, b: str) -> float:
        x, y = self.vector(a), self.vector(b)
        return float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y)))


class SourceLabeler:
    """Visual-source labels: 1 when the word's embedding matches a present category."""

    def __init__(self, vocab, vectors: WordVectors, categories, tau: float = 0.6):
        self.tau = tau
        words = np.array([vectors.vector(t) for t in vocab.tokens])
        cats = np.array([vectors.vector(c) for c in categories])
        words = words / np.linalg.norm(words, axis=1, keepdims=True)
        cats = cats / np.linalg.norm(cats, axis=1, keepdims=True)
        self.cos = words @ cats.T  # [|Y|, C]
        self.hit = self.cos >= tau

    def labels(self, tokens, scene) -> np.ndarray:
        """[T, 2] array of (s0_hat, s1_hat) for each token of the sequence."""
        present = sorted({o.category_id for o in scene.objects})
        s1 = self.hit[np.asarray(tokens, dtype=int)][:, present].any(1) if len(tokens) else \
            np.zeros(0, dtype=bool)
        s1 = s1.astype(np.float64)
        return np.stack([1.0 - s1, s1], -1)


def source_labels(explanation_tokens, scene, vocab, vectors: WordVectors, categories,
                  tau: float = 0.6) -> np.ndarray:
    return SourceLabeler(vocab, vectors, categories, tau).labels(explanation_tokens, scene)

