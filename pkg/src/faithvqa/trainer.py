"""Joint training of the explainer with online faithfulness filtering.

Each gold explanation of a training item is a separate candidate. Per batch:
frozen VQA forward, sample an answer one-hot, teacher-force every candidate,
score its faithfulness, drop candidates whose predicted answer is wrong or
whose score is under the current threshold, and optimize
``w_xe * L_XE + w_s * L_s + w_f * L_f`` over the survivors.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .batching import make_batch, minibatches
from .explainer import (Explainer, ExplainerConfig, SourceLabeler, WordVectors,
                        sample_answer_embedding, source_loss, xe_loss)
from .faithfulness import (faithfulness_loss, filter_threshold, score_explanations,
                           score_histogram)
from .nncore import (DTYPE, ParameterStore, config_hash, load_arrays, load_checkpoint,
                     save_arrays, save_checkpoint)
from .toyworld import CATEGORIES
from .vqa import VQAModel

log = logging.getLogger(__name__)

MODES = ("random", "filtered", "filtered_lf")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "filtered_lf"
    xi: float = 0.3
    ramp: float = 0.02
    epochs: int = 25
    batch_size: int = 128
    lr: float = 5e-4
    lr_decay: float = 0.8
    decay_every: int = 3
    seed: int = 0
    w_xe: float = 1.0
    w_s: float = 1.0
    w_f: float = 1.0
    exact_second_order: bool = True
    tau: float = 0.6
    audit_every: int = 1  # 0 disables; the last epoch is always audited otherwise
    grad_clip: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError("xi must lie in [0, 1]")

    @property
    def filtering(self) -> bool:
        return self.mode != "random"

    @property
    def uses_lf(self) -> bool:
        return self.mode == "filtered_lf" and self.w_f > 0

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_every)


@dataclass
class TrainReport:
    config: dict
    epochs: list = field(default_factory=list)
    last_scores: list = field(default_factory=list)
    skipped_batches: int = 0
    checkpoints: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def candidates(items) -> list:
    return [(i, k) for i, it in enumerate(items) for k in range(len(it.gold_explanations))]


class ExplainerTrainer:
    """Stateful loop so training can be checkpointed and resumed between epochs."""

    def __init__(self, items, vocab, vqa: VQAModel, cfg: TrainConfig,
                 explainer_cfg: ExplainerConfig | None = None, vectors: WordVectors | None = None):
        if any(p.requires_grad for p in vqa.parameters()):
            raise ValueError("the VQA model must be frozen before explainer training")
        self.items = [it for it in items if it.split == "train"]
        self.vocab = vocab
        self.vqa = vqa
        self.cfg = cfg
        self.explainer_cfg = explainer_cfg or ExplainerConfig(
            len(vocab), len(vocab.answers), feature_dim=vqa.cfg.feature_dim,
            question_dim=vqa.cfg.hidden, seed=cfg.seed)
        self.model = Explainer(self.explainer_cfg)
        self.opt = torch.optim.Adam(ParameterStore(self.model).trainable_parameters(), lr=cfg.lr)
        self.labeler = SourceLabeler(vocab, vectors or WordVectors.default(vocab), CATEGORIES,
                                     cfg.tau)
        self.rng = np.random.default_rng(cfg.seed)
        self.cands = candidates(self.items)
        self.step = 0
        self.epoch = 0
        self.report = TrainReport({"train": asdict(cfg), "explainer": asdict(self.explainer_cfg),
                                   "train_hash": config_hash(asdict(cfg))})
        self._vqa_snapshot = ParameterStore(vqa).snapshot()

    # -- one batch -----------------------------------------------------------

    def _labels(self, chosen):
        seqs = [self.items[i].gold_explanations[k].tokens for i, k in chosen]
        steps = max(len(s) for s in seqs) + 1
        out = np.zeros((len(seqs), steps, 2))
        for b, (i, k) in enumerate(chosen):
            toks = list(seqs[b]) + [self.vocab.eos_id]
            out[b, :len(toks)] = self.labeler.labels(toks, self.items[i].scene)
        return torch.as_tensor(out, dtype=DTYPE)

    def _batch(self, chosen, a_s_mode="sample", create_graph=False):
        batch = make_batch([self.items[i] for i, _ in chosen], self.vocab.pad_id)
        with torch.no_grad():
            fwd = self.vqa.run(batch)
        a_s = sample_answer_embedding(fwd.probs, self.rng, a_s_mode)
        seqs = [self.items[i].gold_explanations[k].tokens for i, k in chosen]
        scored = score_explanations(self.vqa, self.model, fwd, a_s, seqs, self.vocab.bos_id,
                                    self.vocab.eos_id, create_graph=create_graph)
        correct = (fwd.predicted == batch.answers)
        return scored, correct

    def train_step(self, chosen) -> dict | None:
        cfg = self.cfg
        create_graph = cfg.uses_lf and cfg.exact_second_order
        scored, correct = self._batch(chosen, create_graph=create_graph)
        s_f = scored.s_f.detach()
        thr = filter_threshold(self.step, cfg.xi, cfg.ramp) if cfg.filtering else 0.0
        accept = correct & (s_f >= thr)
        stats = {"n": len(chosen), "accepted": int(accept.sum()),
                 "s_f_sum": float(s_f.sum()), "scores": s_f.tolist()}
        if not bool(accept.any()):
            return stats | {"skipped": True}
        forced = scored.forced
        l_xe = xe_loss(forced.gold_logp, forced.mask)
        l_s = source_loss(forced.s, self._labels(chosen), forced.mask)
        loss_items = cfg.w_xe * l_xe + cfg.w_s * l_s
        l_f = torch.zeros_like(l_xe)
        if cfg.uses_lf:
            g_exp = scored.g_explanation if cfg.exact_second_order else \
                scored.g_explanation.detach()
            l_f = faithfulness_loss(scored.g_answer, g_exp)
            loss_items = loss_items + cfg.w_f * l_f
        w = accept.to(DTYPE)
        loss = (loss_items * w).sum() / w.sum()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {self.step}")
        self.opt.zero_grad()
        loss.backward()
        for n, p in self.model.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient for {n} at step {self.step}")
        if any(p.grad is not None for p in self.vqa.parameters()):
            raise RuntimeError("gradient reached a frozen VQA parameter")
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.opt.step()
        self.step += 1
        acc = w.sum()
        return stats | {"skipped": False, "loss": float(loss.detach()),
                        "l_xe": float((l_xe * w).sum() / acc), "l_s": float((l_s * w).sum() / acc),
                        "l_f": float((l_f.detach() * w).sum() / acc)}

    # -- epochs --------------------------------------------------------------

    def run_epoch(self) -> dict:
        cfg = self.cfg
        lr = cfg.lr_at(self.epoch)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.model.train()
        sums = {"loss": 0.0, "l_xe": 0.0, "l_s": 0.0, "l_f": 0.0}
        n = accepted = steps = skipped = batches = 0
        s_f_total = 0.0
        scores = []
        for idx in minibatches(len(self.cands), cfg.batch_size, self.rng):
            stats = self.train_step([self.cands[i] for i in idx])
            batches += 1
            n += stats["n"]
            accepted += stats["accepted"]
            s_f_total += stats["s_f_sum"]
            scores.extend(stats["scores"])
            if stats["skipped"]:
                skipped += 1
                continue
            steps += 1
            for k in sums:
                sums[k] += stats[k]
        if skipped > 0.5 * batches:
            warnings.warn(f"epoch {self.epoch}: {skipped}/{batches} batches had no survivors",
                          stacklevel=2)
        self.report.skipped_batches += skipped
        row = {"epoch": self.epoch, "lr": lr, "steps": self.step,
               **{k: v / max(steps, 1) for k, v in sums.items()},
               "accepted_fraction": accepted / max(n, 1), "mean_s_f": s_f_total / max(n, 1),
               "skipped_batches": skipped}
        self.report.last_scores = scores
        last = self.epoch + 1 >= cfg.epochs
        if cfg.audit_every and ((self.epoch + 1) % cfg.audit_every == 0 or last):
            row["audit"] = self.audit()
        self.report.epochs.append(row)
        log.info("epoch %d %s", self.epoch, {k: v for k, v in row.items() if k != "audit"})
        self.epoch += 1
        return row

    def fit(self, epochs: int | None = None):
        target = self.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            self.run_epoch()
        self.check_vqa_frozen()
        return self.model, self.report

    def check_vqa_frozen(self) -> None:
        for n, p in self.vqa.named_parameters():
            if not torch.equal(p.detach(), self._vqa_snapshot[n]):
                raise RuntimeError(f"frozen VQA parameter {n} changed during training")

    # -- evaluation-only oracle audit ---------------------------------------

    def audit(self, batch_size: int = 256) -> dict:
        """Filter decisions on every training candidate, scored against oracle labels.

        Runs with argmax answers and no parameter updates; its output is only
        reported, never fed back into training.
        """
        thr = filter_threshold(self.step, self.cfg.xi, self.cfg.ramp) if self.cfg.filtering else 0.0
        counts = {(f, c): [0, 0] for f in (True, False) for c in (True, False)}
        scores = []
        for idx in minibatches(len(self.cands), batch_size):
            chosen = [self.cands[i] for i in idx]
            scored, correct = self._batch(chosen, a_s_mode="argmax")
            for (i, k), s, ok in zip(chosen, scored.s_f.detach().tolist(), correct.tolist()):
                faithful = self.items[i].gold_explanations[k].is_faithful
                acc = ok and s >= thr
                counts[(faithful, ok)][0] += int(acc)
                counts[(faithful, ok)][1] += 1
                scores.append(s)

        def rate(faithful, cond_correct):
            num = sum(counts[(faithful, c)][0] for c in (True, False) if c or not cond_correct)
            den = sum(counts[(faithful, c)][1] for c in (True, False) if c or not cond_correct)
            return num / den if den else float("nan")

        # distractor rejection as the positive class, among correctly answered items
        rej_d = counts[(False, True)][1] - counts[(False, True)][0]
        rej_f = counts[(True, True)][1] - counts[(True, True)][0]
        precision = rej_d / (rej_d + rej_f) if rej_d + rej_f else float("nan")
        recall = rej_d / counts[(False, True)][1] if counts[(False, True)][1] else float("nan")
        return {"threshold": thr,
                "accept_faithful": rate(True, True), "accept_distractor": rate(False, True),
                "accept_faithful_all": rate(True, False),
                "accept_distractor_all": rate(False, False),
                "distractor_rejection_precision": precision,
                "distractor_rejection_recall": recall,
                "histogram": score_histogram(scores).tolist()}

    # -- persistence ---------------------------------------------------------

    def save_state(self, path) -> None:
        """Explainer weights plus optimizer moments, RNG state and counters."""
        path = Path(path)
        save_checkpoint(self.model, path / "explainer", "explainer",
                        asdict(self.explainer_cfg), {"train": asdict(self.cfg)})
        arrays, names = {}, dict((id(p), n) for n, p in self.model.named_parameters())
        for p, st in self.opt.state.items():
            for key in ("exp_avg", "exp_avg_sq"):
                arrays[f"{names[id(p)]}/{key}"] = st[key].numpy()
            arrays[f"{names[id(p)]}/step"] = np.asarray(float(st["step"]))
        save_arrays(path / "optimizer", arrays, {
            "kind": "trainer-state", "step": self.step, "epoch": self.epoch,
            "rng": self.rng.bit_generator.state, "report": self.report.to_json()})

    def load_state(self, path) -> None:
        path = Path(path)
        load_checkpoint(self.model, path / "explainer",
                        expected_hash=config_hash(asdict(self.explainer_cfg)))
        meta, arrays = load_arrays(path / "optimizer")
        self.opt = torch.optim.Adam(ParameterStore(self.model).trainable_parameters(),
                                    lr=self.cfg.lr)
        params = dict(self.model.named_parameters())
        for name, p in params.items():
            if f"{name}/step" not in arrays:
                continue
            self.opt.state[p] = {
                "step": torch.tensor(float(arrays[f"{name}/step"])),
                "exp_avg": torch.as_tensor(arrays[f"{name}/exp_avg"], dtype=DTYPE),
                "exp_avg_sq": torch.as_tensor(arrays[f"{name}/exp_avg_sq"], dtype=DTYPE)}
        self.step, self.epoch = meta["step"], meta["epoch"]
        self.rng.bit_generator.state = meta["rng"]
        self.report = TrainReport(**meta["report"])


def train_explainer(items, vocab, vqa: VQAModel, cfg: TrainConfig, **kw):
    return ExplainerTrainer(items, vocab, vqa, cfg, **kw).fit()


def write_report(report: TrainReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
