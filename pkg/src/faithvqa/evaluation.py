"""Test-time evaluation: decode, score faithfulness, link, compare with oracles and LIME."""
from __future__ import annotations

import warnings

import numpy as np
import torch

from . import linker
from .batching import make_batch, minibatches
from .explainer import Explainer, sample_answer_embedding
from .faithfulness import histogram_rows, score_explanations, score_histogram
from .limeaudit import NUM_SAMPLES, P_BLIND, agreement_score, lime_item
from .toyworld import CATEGORIES
from .metrics import (DegenerateAttentionWarning, EmptyCandidateWarning, cider, corpus_bleu4,
                      emd, oracle_map, rasterize_attention, rouge_l)
from .vqa import VQAModel

LOW_BIN = 0.1


def explain_items(vqa: VQAModel, explainer: Explainer, items, vocab, batch_size: int = 128,
                  max_len: int = 20) -> list:
    """Greedy explanations for the argmax answer, with S_f, links and the attention map."""
    rows = []
    explainer.eval()
    for idx in minibatches(len(items), batch_size):
        chunk = [items[i] for i in idx]
        batch = make_batch(chunk, vocab.pad_id)
        with torch.no_grad():
            fwd = vqa.run(batch)
            a_s = sample_answer_embedding(fwd.probs, mode="argmax")
            outs = explainer.decode(explainer.fuse(fwd.vq, a_s, fwd.q, fwd.mask),
                                    vocab.bos_id, vocab.eos_id, "greedy", max_len)
        scored = score_explanations(vqa, explainer, fwd, a_s, [o.tokens for o in outs],
                                    vocab.bos_id, vocab.eos_id)
        s_f = scored.s_f.detach().tolist()
        for it, out, s, pred in zip(chunk, outs, s_f, fwd.predicted.tolist()):
            mm = linker.build(out, vocab, it.scene)
            rows.append({"item": it, "output": out, "multimodal": mm, "s_f": float(s),
                         "predicted": int(pred), "correct": int(pred) == it.answer_id})
    return rows


def text_scores(rows, vocab) -> dict:
    cands = [vocab.decode(r["output"].tokens) for r in rows]
    refs = [[vocab.decode(g.tokens) for g in r["item"].gold_explanations] for r in rows]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyCandidateWarning)
        rouge = [rouge_l(c, rs) for c, rs in zip(cands, refs)]
        cid, _ = cider(cands, refs)
    return {"bleu4": corpus_bleu4(cands, refs), "rougeL": float(np.mean(rouge)) if rouge else 0.0,
            "cider": cid}


def category_mention_rate(rows, vocab) -> float:
    """Share of color/size-question explanations naming a causal object's category."""
    hits = []
    for r in rows:
        item = r["item"]
        if item.template not in ("color", "size"):
            continue
        causal = {o.category_id for o in item.scene.objects if o.object_id in item.causal_object_ids}
        words = set(vocab.decode(r["output"].tokens))
        hits.append(any(CATEGORIES[c] in words for c in causal))
    return float(np.mean(hits)) if hits else float("nan")


def faithfulness_summary(scores) -> dict:
    scores = np.asarray(scores, dtype=np.float64)
    counts = score_histogram(scores)
    return {"n": int(scores.size),
            "mean_s_f": float(scores.mean()) if scores.size else float("nan"),
            "frac_low": float((scores <= LOW_BIN).mean()) if scores.size else float("nan"),
            "histogram": [list(r) for r in histogram_rows(counts)]}


def lime_scores(vqa, rows, Ks=(1, 2, 3), n: int = NUM_SAMPLES, p_blind: float = P_BLIND,
                seed: int = 0, max_items: int | None = None) -> dict:
    """Mean LIME agreement per K over correctly answered items (undefined ones skipped)."""
    chosen = [r for r in rows if r["correct"]]
    if max_items is not None:
        chosen = chosen[:max_items]
    per_k = {k: [] for k in Ks}
    missing = {k: 0 for k in Ks}
    per_item = []
    for j, r in enumerate(chosen):
        item = r["item"]
        fits = lime_item(vqa, item, Ks, n, p_blind, seed + j)
        ids = item.scene.object_ids()
        linked = sorted({ids.index(oid) for _, oid in r["output"].links})
        feats = item.scene.feature_matrix()
        entry = {"item_id": item.item_id, "linked": linked}
        for k, fit in fits.items():
            score = agreement_score(fit.w, linked, feats)
            entry[f"K={k}"] = {"w": fit.w.tolist(), "support": fit.support, "agreement": score}
            if score is None:
                missing[k] += 1
            else:
                per_k[k].append(score)
        per_item.append(entry)
    summary = {f"K={k}": {"mean": float(np.mean(v)) if v else float("nan"), "n": len(v),
                          "missing": missing[k]} for k, v in per_k.items()}
    return {"summary": summary, "items": per_item}


def evaluate(vqa: VQAModel, explainer: Explainer, items, vocab, Ks=(1, 2, 3),
             lime: bool = True, lime_samples: int = NUM_SAMPLES, seed: int = 0,
             lime_max_items: int | None = None, metrics=("bleu4", "rougeL", "cider", "emd")) -> dict:
    rows = explain_items(vqa, explainer, items, vocab)
    report = {"n_items": len(rows), "vqa_accuracy": float(np.mean([r["correct"] for r in rows]))
              if rows else float("nan")}
    text = text_scores(rows, vocab) if rows else {}
    report["text"] = {k: v for k, v in text.items() if k in metrics}
    if "emd" in metrics:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateAttentionWarning)
            dists = [emd(rasterize_attention(r["output"], r["item"].scene), oracle_map(r["item"]))
                     for r in rows]
        report["emd"] = float(np.mean(dists)) if dists else float("nan")
    report["faithfulness"] = faithfulness_summary([r["s_f"] for r in rows if r["correct"]])
    report["category_mention_rate"] = category_mention_rate(rows, vocab)
    report["links_per_explanation"] = float(np.mean([len(r["output"].links) for r in rows])) \
        if rows else float("nan")
    if lime:
        report["lime"] = lime_scores(vqa, rows, Ks, lime_samples, seed=seed,
                                     max_items=lime_max_items)
    return report
