"""Object-level Grad-CAM, the faithfulness score and its filter/loss uses.

The attribution of a scalar score to object i is ``relu(<d score / d vq_i, vq_i>)``,
i.e. gradient-times-input summed over the feature axis. The faithfulness score
is the cosine between the attribution of the predicted answer's logit and
that of the explanation's log-likelihood; both are computed w.r.t. the same
attended features ``vq``.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .explainer import Explainer, TeacherForced, shift_targets
from .nncore import grad
from .vqa import VQAForward, VQAModel

TINY = 1e-300


class Source(enum.Enum):
    ANSWER = "answer"
    EXPLANATION = "explanation"


class Reason(enum.Enum):
    ACCEPTED = "accepted"
    LOW_SCORE = "low_score"
    WRONG_ANSWER = "wrong_answer"


@dataclass(frozen=True)
class AttributionVector:
    values: np.ndarray
    source: Source

    def __post_init__(self):
        if (np.asarray(self.values) < 0).any():
            raise ValueError("attribution values must be nonnegative")


@dataclass(frozen=True)
class FilterDecision:
    score: float
    threshold: float
    accepted: bool
    reason: Reason


class NonFiniteGradientError(RuntimeError):
    pass


def gradcam(score, vq, mask=None, create_graph: bool = False,
            retain_graph: bool | None = None) -> torch.Tensor:
    """Per-object attribution [B, V] of a scalar (summed over independent items)."""
    g = grad(score, vq, create_graph=create_graph, retain_graph=retain_graph)
    cam = torch.relu((g * vq).sum(-1))
    if mask is not None:
        cam = cam * mask.to(cam.dtype)
    return cam


def cosine(a, b) -> torch.Tensor:
    """Row-wise cosine; 0 whenever either row is all zero."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    na = (a * a).sum(-1)
    nb = (b * b).sum(-1)
    ok = (na > 0) & (nb > 0)
    denom = torch.sqrt(na.clamp_min(TINY) * nb.clamp_min(TINY))
    return torch.where(ok, (a * b).sum(-1) / denom, torch.zeros_like(denom))


def faithfulness_score(g_answer, g_explanation) -> torch.Tensor:
    if g_answer.shape != g_explanation.shape:
        raise ValueError(f"attribution shapes differ: {tuple(g_answer.shape)} vs "
                         f"{tuple(g_explanation.shape)}")
    return cosine(g_answer, g_explanation).clamp(max=1.0)


def faithfulness_loss(g_answer, g_explanation) -> torch.Tensor:
    """1 - S_f per item; the answer-side vector is treated as a constant."""
    loss = 1.0 - faithfulness_score(g_answer.detach(), g_explanation)
    if not torch.isfinite(loss).all():
        raise NonFiniteGradientError("non-finite faithfulness loss")
    return loss


def filter_threshold(it: int, xi: float, rate: float = 0.02) -> float:
    """Threshold ramping linearly from 0 to `xi` (over 50 optimizer steps by default)."""
    if it < 0:
        raise ValueError("iteration count must be >= 0")
    return xi * min(rate * it, 1.0)


def filter_decision(score: float, it: int, xi: float, answer_correct: bool,
                    rate: float = 0.02) -> FilterDecision:
    thr = filter_threshold(it, xi, rate)
    if not answer_correct:
        return FilterDecision(score, thr, False, Reason.WRONG_ANSWER)
    if score < thr:
        return FilterDecision(score, thr, False, Reason.LOW_SCORE)
    return FilterDecision(score, thr, True, Reason.ACCEPTED)


@dataclass
class Scored:
    """Both attribution vectors plus the teacher-forced pass that produced one of them."""
    s_f: torch.Tensor  # [B]
    g_answer: torch.Tensor  # [B, V]
    g_explanation: torch.Tensor  # [B, V]
    forced: TeacherForced
    vq: torch.Tensor


def answer_attribution(vqa: VQAModel, fwd: VQAForward, answer_ids, vq=None) -> torch.Tensor:
    vq = fwd.vq.detach().requires_grad_(True) if vq is None else vq
    _, logits = vqa.head(vq, fwd.q.detach())
    chosen = logits.gather(1, torch.as_tensor(answer_ids)[:, None]).sum()
    return gradcam(chosen, vq, fwd.mask).detach()


def score_explanations(vqa: VQAModel, explainer: Explainer, fwd: VQAForward, a_s, token_seqs,
                       bos_id: int, eos_id: int, create_graph: bool = False) -> Scored:
    """Faithfulness of given token sequences under the current explainer.

    ``log p(y)`` is the summed teacher-forced log-probability of the sequence
    including its end token. With ``create_graph`` the explanation-side vector
    stays differentiable w.r.t. the explainer parameters.
    """
    vq = fwd.vq.detach().requires_grad_(True)
    g_ans = answer_attribution(vqa, fwd, fwd.predicted, vq)
    fused = explainer.fuse(vq, a_s, fwd.q.detach(), fwd.mask)
    inputs, targets, tmask = shift_targets(token_seqs, bos_id, eos_id)
    forced = explainer.teacher_forced(fused, inputs, targets, tmask)
    g_exp = gradcam(forced.sequence_logp().sum(), vq, fwd.mask, create_graph=create_graph,
                    retain_graph=True)
    s_f = faithfulness_score(g_ans, g_exp)
    return Scored(s_f, g_ans, g_exp, forced, vq)


def score_histogram(scores, bins: int = 10) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size and ((scores < 0).any() or (scores > 1).any()):
        warnings.warn("faithfulness scores outside [0, 1] were clamped", stacklevel=2)
        scores = np.clip(scores, 0.0, 1.0)
    counts, _ = np.histogram(scores, bins=bins, range=(0.0, 1.0))
    return counts


def histogram_rows(counts) -> list:
    edges = np.linspace(0.0, 1.0, len(counts) + 1)
    return [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]


def write_histogram_csv(counts, path) -> None:
    with open(path, "w") as f:
        f.write("bin_lo,bin_hi,count\n")
        for lo, hi, c in histogram_rows(counts):
            f.write(f"{lo:.1f},{hi:.1f},{c}\n")


def write_histogram_svg(counts, path, title: str = "faithfulness scores") -> None:
    width, height, pad = 420, 240, 30
    total = max(int(np.sum(counts)), 1)
    top = max(max(counts, default=0) / total, 1e-9)
    bw = (width - 2 * pad) / max(len(counts), 1)
    bars = []
    for i, (lo, hi, c) in enumerate(histogram_rows(counts)):
        h = (height - 2 * pad) * (c / total) / top
        x = pad + i * bw
        bars.append(f'<rect x="{x:.1f}" y="{height - pad - h:.1f}" width="{bw - 2:.1f}" '
                    f'height="{h:.1f}" fill="#4a7ab5"><title>[{lo:.1f}, {hi:.1f}): {c}'
                    f'</title></rect>')
        bars.append(f'<text x="{x:.1f}" y="{height - pad + 14}" font-size="9">{lo:.1f}</text>')
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
           f'<text x="{pad}" y="18" font-size="12">{title} (n={int(np.sum(counts))})</text>'
           + "".join(bars) + "</svg>\n")
    with open(path, "w") as f:
        f.write(svg)
