"""LIME over scene objects and the explanation/LIME agreement score.

Each object is one interpretable unit. Perturbations blind objects by zeroing
their feature vectors; the surrogate is a LASSO fit read off the LARS path at
the first point with exactly K active units.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.linear_model import lars_path

from .batching import make_batch
from .nncore import DTYPE
from .vqa import VQAModel

NUM_SAMPLES = 256
P_BLIND = 0.4


@dataclass
class LimeResult:
    w: np.ndarray  # [V], zero off the support
    K: int
    intercept: float
    samples_used: int
    seed: int | None = None

    @property
    def support(self) -> list:
        return [int(i) for i in np.flatnonzero(self.w)]


def perturb_samples(features, n: int = NUM_SAMPLES, p_blind: float = P_BLIND, rng=None):
    """Random blinding masks [n, V] (1 = kept) and the matching zero-filled features."""
    if n < 1:
        raise ValueError("need at least one sample")
    if not 0.0 <= p_blind < 1.0:
        raise ValueError("p_blind must lie in [0, 1)")
    features = np.asarray(features, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    masks = (rng.random((n, features.shape[0])) >= p_blind).astype(np.int64)
    return masks, masks[:, :, None] * features[None]


def fit_lasso_path(X, y, K: int, seed: int | None = None) -> LimeResult:
    """Coefficients at the first LASSO-path knot with exactly K nonzeros.

    Columns are standardized before the path is computed and the
    coefficients mapped back. Columns that never vary are left out (their
    weight is 0). If the path
    never reaches K active units the densest point is used.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, v = X.shape
    if n < 2:
        raise ValueError("need at least two samples")
    if not 1 <= K <= v:
        raise ValueError(f"K must lie in [1, {v}]")
    if y.shape != (n,):
        raise ValueError("y must have one entry per sample")
    x_mean, y_mean, x_std = X.mean(0), y.mean(), X.std(0)
    live = np.flatnonzero(x_std > 0)
    w = np.zeros(v)
    if live.size and np.ptp(y) > 0:
        # standardized columns, so units enter in order of |correlation|
        Xc, yc = (X[:, live] - x_mean[live]) / x_std[live], y - y_mean
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # sklearn's degenerate-path notices
            _, _, coefs = lars_path(Xc, yc, method="lasso")
        nnz = (coefs != 0).sum(0)
        hits = np.flatnonzero(nnz == K)
        col = hits[0] if hits.size else int(np.argmax(nnz))
        w[live] = coefs[:, col] / x_std[live]
    return LimeResult(w, K, float(y_mean - x_mean @ w), n, seed)


def agreement_score(w, linked_objects, features) -> float | None:
    """sum_i |w_i| max_{j in L} cos(v_i, v_j) / sum_i |w_i|.

    Empty L gives 0; all-zero w gives None (undefined).
    """
    w = np.abs(np.asarray(w, dtype=np.float64))
    if w.sum() == 0:
        return None
    linked = sorted(set(int(j) for j in linked_objects))
    if not linked:
        return 0.0
    v = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    cos = (v @ v[linked].T) / (safe[:, None] * safe[linked][None])
    cos = np.where((norms[:, None] > 0) & (norms[linked][None] > 0), cos, 0.0)
    return float((w * cos.max(1)).sum() / w.sum())


@torch.no_grad()
def predictor_outputs(vqa: VQAModel, item, perturbed, answer_id: int) -> np.ndarray:
    """Sigmoid score of `answer_id` for each perturbed copy of the scene."""
    n = perturbed.shape[0]
    base = make_batch([item])
    feats = torch.as_tensor(perturbed, dtype=DTYPE)
    mask = base.mask.expand(n, -1)
    q = vqa.encode_question(base.questions, base.qlens).expand(n, -1)
    return vqa(feats, mask, q).probs[:, answer_id].numpy()


def lime_item(vqa: VQAModel, item, Ks=(1, 2, 3), n: int = NUM_SAMPLES,
              p_blind: float = P_BLIND, seed: int = 0) -> dict:
    """LIME fits for one item at each K, explaining the VQA model's predicted answer."""
    with torch.no_grad():
        answer = int(vqa.run(make_batch([item])).predicted[0])
    feats = item.scene.feature_matrix()
    masks, perturbed = perturb_samples(feats, n, p_blind, np.random.default_rng(seed))
    y = predictor_outputs(vqa, item, perturbed, answer)
    Ks = [k for k in Ks if k <= feats.shape[0]]
    return {k: fit_lasso_path(masks, y, k, seed) for k in Ks}
