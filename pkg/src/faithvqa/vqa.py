"""The answering model: GRU question encoder, object attention, fused head.

Follows the bottom-up/top-down layout with a plain leaky-ReLU classifier.
Attended features are kept per object (``vq[i] = alpha[i] * v[i]``) rather
than pooled, because the attribution vectors downstream are per object.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .batching import Batch, make_batch, minibatches
from .nncore import DTYPE, FC, GRUCell, ParameterStore, grad

log = logging.getLogger(__name__)


class VocabularyError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class VQAConfig:
    vocab_size: int
    num_answers: int
    feature_dim: int = 64
    word_dim: int = 32
    hidden: int = 64
    seed: int = 0


@dataclass(frozen=True)
class VQATrainConfig:
    epochs: int = 40
    lr: float = 2e-3
    batch_size: int = 64
    seed: int = 0


@dataclass
class VQAForward:
    q: torch.Tensor  # [B, H]
    alpha: torch.Tensor  # [B, V]
    vq: torch.Tensor  # [B, V, D]
    h: torch.Tensor  # [B, H]
    logits: torch.Tensor  # [B, A]
    probs: torch.Tensor  # [B, A]
    mask: torch.Tensor  # [B, V]

    @property
    def predicted(self) -> torch.Tensor:
        return self.probs.argmax(-1)


def masked_softmax(scores, mask):
    scores = scores.masked_fill(~mask, -math.inf)
    return torch.softmax(scores, dim=-1)


class VQAModel(nn.Module):
    def __init__(self, cfg: VQAConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        h, d = cfg.hidden, cfg.feature_dim
        self.embed = nn.Embedding(cfg.vocab_size, cfg.word_dim, dtype=DTYPE)
        self.gru = GRUCell(cfg.word_dim, h)
        self.att_v = FC(d, h, "leaky_relu", "att_v")
        self.att_q = FC(h, h, "leaky_relu", "att_q")
        self.att_out = FC(h, 1, "identity", "att_out")
        self.q_net = FC(h, h, "leaky_relu", "q_net")
        self.v_net = FC(d, h, "leaky_relu", "v_net")
        self.cls_hidden = FC(h, 2 * h, "leaky_relu", "cls_hidden")
        self.cls_out = FC(2 * h, cfg.num_answers, "identity", "cls_out")

    def encode_question(self, tokens, lengths=None):
        """Final GRU state; padded positions leave the state untouched."""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens[None]
        if lengths is None:
            lengths = torch.full((tokens.shape[0],), tokens.shape[1], dtype=torch.long)
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise VocabularyError(f"token id outside vocabulary of size {self.cfg.vocab_size}")
        h = torch.zeros(tokens.shape[0], self.cfg.hidden, dtype=DTYPE)
        for t in range(tokens.shape[1]):
            live = (t < lengths)[:, None]
            h = torch.where(live, self.gru(self.embed(tokens[:, t]), h), h)
        return h

    def attend(self, feats, mask, q):
        scores = self.att_out(self.att_v(feats) * self.att_q(q)[:, None, :]).squeeze(-1)
        return masked_softmax(scores, mask)

    def head(self, vq, q):
        """Logits from per-object attended features; `vq` may be a gradient leaf."""
        h = self.q_net(q) * self.v_net(vq.sum(1))
        return h, self.cls_out(self.cls_hidden(h))

    def forward(self, feats, mask, q) -> VQAForward:
        if mask.shape[-1] == 0 or not bool(mask.any(-1).all()):
            raise ValueError("every scene needs at least one object")
        alpha = self.attend(feats, mask, q)
        vq = alpha[..., None] * feats
        h, logits = self.head(vq, q)
        return VQAForward(q, alpha, vq, h, logits, torch.sigmoid(logits), mask)

    def run(self, batch: Batch) -> VQAForward:
        return self(batch.feats, batch.mask, self.encode_question(batch.questions, batch.qlens))


def answer_logit_gradients(model: VQAModel, fwd: VQAForward, answer_ids) -> torch.Tensor:
    """d s[answer] / d vq_i for every object, shape [B, V, D]."""
    answer_ids = torch.as_tensor(answer_ids, dtype=torch.long).reshape(-1)
    if answer_ids.min() < 0 or answer_ids.max() >= model.cfg.num_answers:
        raise IndexError(f"answer id outside [0, {model.cfg.num_answers})")
    vq = fwd.vq.detach().requires_grad_(True)
    _, logits = model.head(vq, fwd.q.detach())
    chosen = logits.gather(1, answer_ids[:, None]).sum()
    return grad(chosen, vq)


def pretrain_vqa(items, vocab_size: int, num_answers: int, model_cfg: VQAConfig | None = None,
                 train_cfg: VQATrainConfig | None = None):
    """Fit the answering model with per-class binary cross-entropy, then freeze it.

    Returns the model and a list of per-epoch mean losses.
    """
    model_cfg = model_cfg or VQAConfig(vocab_size, num_answers)
    train_cfg = train_cfg or VQATrainConfig()
    if any(it.split != "train" for it in items):
        raise ValueError("pretrain_vqa only accepts training-split items")
    model = VQAModel(model_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    rng = np.random.default_rng(train_cfg.seed)
    history = []
    for epoch in range(train_cfg.epochs):
        total, seen = 0.0, 0
        for idx in minibatches(len(items), train_cfg.batch_size, rng):
            batch = make_batch([items[i] for i in idx])
            fwd = model.run(batch)
            target = nn.functional.one_hot(batch.answers, num_answers).to(DTYPE)
            loss = nn.functional.binary_cross_entropy_with_logits(
                fwd.logits, target, reduction="sum") / len(idx)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite VQA loss at epoch {epoch}: {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        history.append(total / seen)
        log.info("vqa epoch %d loss %.4f", epoch, history[-1])
    model.zero_grad(set_to_none=True)
    ParameterStore(model).freeze()
    model.eval()
    return model, history


@torch.no_grad()
def vqa_accuracy(model: VQAModel, items, batch_size: int = 256) -> float:
    correct = 0
    for idx in minibatches(len(items), batch_size):
        batch = make_batch([items[i] for i in idx])
        correct += int((model.run(batch).predicted == batch.answers).sum())
    return correct / max(len(items), 1)


def model_config_dict(cfg) -> dict:
    return asdict(cfg)
