"""Padding helpers that turn toy-world records into dense float64 tensors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .nncore import DTYPE


@dataclass
class Batch:
    feats: torch.Tensor  # [B, V, D], zero rows for padding
    mask: torch.Tensor  # [B, V] bool
    questions: torch.Tensor  # [B, L] long
    qlens: torch.Tensor  # [B] long
    answers: torch.Tensor  # [B] long

    def __len__(self):
        return self.feats.shape[0]


def pad_tokens(seqs, pad_id: int = 0):
    lens = [len(s) for s in seqs]
    out = torch.full((len(seqs), max(lens, default=0) or 1), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        if len(s):
            out[i, :len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out, torch.as_tensor(lens, dtype=torch.long)


def scene_tensors(scenes, feature_dim: int | None = None):
    if feature_dim is None:
        feature_dim = len(scenes[0].objects[0].features)
    vmax = max(len(s.objects) for s in scenes)
    feats = np.zeros((len(scenes), vmax, feature_dim))
    mask = np.zeros((len(scenes), vmax), dtype=bool)
    for b, s in enumerate(scenes):
        feats[b, :len(s.objects)] = s.feature_matrix()
        mask[b, :len(s.objects)] = True
    return torch.as_tensor(feats, dtype=DTYPE), torch.as_tensor(mask)


def make_batch(items, pad_id: int = 0) -> Batch:
    feats, mask = scene_tensors([it.scene for it in items])
    q, qlens = pad_tokens([it.question_tokens for it in items], pad_id)
    answers = torch.as_tensor([it.answer_id for it in items], dtype=torch.long)
    return Batch(feats, mask, q, qlens, answers)


def minibatches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size].tolist()
