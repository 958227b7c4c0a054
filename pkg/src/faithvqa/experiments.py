"""Ablation driver shared by the acceptance suite and ``scripts/run_ablation.py``.

One dataset and one frozen VQA model; the explainer is trained in each mode
for each seed and evaluated on the test split.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .evaluation import evaluate
from .toyworld import generate_dataset
from .trainer import MODES, ExplainerTrainer, TrainConfig
from .vqa import VQATrainConfig, pretrain_vqa, vqa_accuracy


@dataclass(frozen=True)
class AblationConfig:
    num_items: int = 2000
    data_seed: int = 0
    seeds: tuple = (0, 1, 2)
    modes: tuple = MODES
    vqa: VQATrainConfig = field(default_factory=VQATrainConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(audit_every=0))
    Ks: tuple = (1, 2, 3)
    lime_max_items: int | None = None


def _mean(xs):
    xs = [x for x in xs if x is not None and np.isfinite(x)]
    return float(np.mean(xs)) if xs else float("nan")


def run_ablation(cfg: AblationConfig = AblationConfig(), log=print) -> dict:
    t0 = time.time()
    ds = generate_dataset(cfg.num_items, cfg.data_seed)
    train, test = ds.split("train"), ds.split("test")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        vqa, history = pretrain_vqa(train, len(ds.vocab), len(ds.vocab.answers),
                                    train_cfg=cfg.vqa)
    out = {"config": asdict(cfg), "vqa": {"test_accuracy": vqa_accuracy(vqa, test),
                                          "loss_history": history,
                                          "seconds": time.time() - t0},
           "runs": {m: {} for m in cfg.modes}}
    log(f"vqa test accuracy {out['vqa']['test_accuracy']:.3f}")
    for seed in cfg.seeds:
        for mode in cfg.modes:
            t = time.time()
            tcfg = replace(cfg.train, mode=mode, seed=seed)
            # the oracle audit only needs the final epoch
            tcfg = replace(tcfg, audit_every=tcfg.epochs)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                trainer = ExplainerTrainer(ds.items, ds.vocab, vqa, tcfg)
                model, report = trainer.fit()
                t_train = time.time() - t
                ev = evaluate(vqa, model, test, ds.vocab, Ks=cfg.Ks, seed=seed,
                              lime_max_items=cfg.lime_max_items)
            ev["lime"].pop("items")
            run = {"train_seconds": t_train, "eval_seconds": time.time() - t - t_train,
                   "final_epoch": report.epochs[-1], "eval": ev}
            out["runs"][mode][str(seed)] = run
            f = ev["faithfulness"]
            log(f"{mode:12s} seed {seed}: test S_f {f['mean_s_f']:.4f} low {f['frac_low']:.4f} "
                f"bleu4 {ev['text']['bleu4']:.3f} "
                f"agreement {[round(v['mean'], 3) for v in ev['lime']['summary'].values()]} "
                f"({t_train:.0f}s + {run['eval_seconds']:.0f}s)")
    out["summary"] = summarize(out)
    out["seconds"] = time.time() - t0
    return out


def summarize(out: dict) -> dict:
    summary = {}
    for mode, runs in out["runs"].items():
        evs = [r["eval"] for r in runs.values()]
        audits = [r["final_epoch"].get("audit", {}) for r in runs.values()]
        summary[mode] = {
            "mean_s_f": _mean([e["faithfulness"]["mean_s_f"] for e in evs]),
            "frac_low": _mean([e["faithfulness"]["frac_low"] for e in evs]),
            "bleu4": _mean([e["text"]["bleu4"] for e in evs]),
            "rougeL": _mean([e["text"]["rougeL"] for e in evs]),
            "cider": _mean([e["text"]["cider"] for e in evs]),
            "emd": _mean([e["emd"] for e in evs]),
            "links_per_explanation": _mean([e["links_per_explanation"] for e in evs]),
            "category_mention_rate": _mean([e["category_mention_rate"] for e in evs]),
            "agreement": {k: _mean([e["lime"]["summary"][k]["mean"] for e in evs])
                     for k in evs[0]["lime"]["summary"]} if evs else {},
            "accept_faithful": _mean([a.get("accept_faithful") for a in audits]),
            "accept_distractor": _mean([a.get("accept_distractor") for a in audits]),
        }
    return summary
