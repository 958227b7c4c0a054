"""Command-line entry point: ``faithvqa <command> ...``.

Every JSON artifact carries a ``provenance`` block (command, arguments,
config hash, dataset hash). Output is deterministic for fixed seeds: sorted
keys, no timestamps. Relative ``--out`` paths resolve under ``$FAITHVQA_OUT``
when that variable is set.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__, linker
from .evaluation import evaluate, explain_items, lime_scores
from .explainer import Explainer, ExplainerConfig
from .faithfulness import score_histogram, write_histogram_csv, write_histogram_svg
from .nncore import ParameterStore, config_hash, load_checkpoint, read_manifest, save_checkpoint
from .toyworld import GenConfig, generate_dataset, read_dataset, write_dataset
from .trainer import ExplainerTrainer, TrainConfig
from .vqa import VQAConfig, VQAModel, VQATrainConfig, pretrain_vqa, vqa_accuracy

OUT_ENV = "FAITHVQA_OUT"
REPORT_VERSION = 1
log = logging.getLogger("faithvqa")


class CommandError(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------------

def out_path(p) -> Path:
    p = Path(p)
    base = os.environ.get(OUT_ENV)
    return p if p.is_absolute() or not base else Path(base) / p


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def dump_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=1, sort_keys=True, allow_nan=True) + "\n")


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, Path):
        return str(x)
    return x


def provenance(args, config: dict, dataset_hash: str | None) -> dict:
    argd = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    return {"command": args.command, "args": _clean(argd), "config": _clean(config),
            "config_hash": config_hash(_clean(config)), "dataset_hash": dataset_hash,
            "package_version": __version__, "report_version": REPORT_VERSION}


def load_vqa(path) -> VQAModel:
    manifest = read_manifest(path)
    if manifest.get("kind") != "vqa":
        raise CommandError(f"{path} is not a VQA checkpoint")
    model = VQAModel(VQAConfig(**manifest["config"]))
    load_checkpoint(model, path)
    ParameterStore(model).freeze()
    model.eval()
    return model


def load_explainer(path, vqa_override=None):
    """Explainer plus the VQA model it was trained against."""
    path = Path(path)
    ckpt = path / "explainer" if (path / "explainer").is_dir() else path
    manifest = read_manifest(ckpt)
    if manifest.get("kind") != "explainer":
        raise CommandError(f"{ckpt} is not an explainer checkpoint")
    model = Explainer(ExplainerConfig(**manifest["config"]))
    load_checkpoint(model, ckpt)
    model.eval()
    vqa_path = vqa_override or manifest["extra"].get("vqa_ckpt")
    if vqa_path is None:
        raise CommandError("no VQA checkpoint recorded; pass --vqa-ckpt")
    return model, load_vqa(vqa_path), manifest


def split_items(ds, split: str):
    items = ds.items if split == "all" else ds.split(split)
    if not items:
        raise CommandError(f"split {split!r} is empty")
    return items


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = GenConfig(p_distractor=args.p_distractor, test_fraction=args.test_fraction)
    ds = generate_dataset(args.n, args.seed, cfg)
    path = out_path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, path)
    summary = {"path": str(path), "dataset_hash": file_hash(path), "num_items": len(ds.items),
               "train": len(ds.split("train")), "test": len(ds.split("test"))}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train_vqa(args) -> int:
    ds = read_dataset(args.data)
    train = ds.split("train")
    mcfg = VQAConfig(len(ds.vocab), len(ds.vocab.answers), seed=args.seed)
    tcfg = VQATrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                          seed=args.seed)
    model, history = pretrain_vqa(train, mcfg.vocab_size, mcfg.num_answers, mcfg, tcfg)
    out = out_path(args.out)
    dhash = file_hash(args.data)
    acc = {s: vqa_accuracy(model, ds.split(s)) for s in ("train", "test") if ds.split(s)}
    save_checkpoint(model, out, "vqa", asdict(mcfg),
                    {"train": asdict(tcfg), "dataset_hash": dhash, "loss_history": history,
                     "accuracy": acc})
    report = {"provenance": provenance(args, {"model": asdict(mcfg), "train": asdict(tcfg)},
                                       dhash),
              "loss_history": history, "accuracy": acc, "checkpoint": str(out)}
    dump_json(report, out / "report.json")
    print(json.dumps({"checkpoint": str(out), "accuracy": acc}, sort_keys=True))
    return 0


def cmd_train_explainer(args) -> int:
    ds = read_dataset(args.data)
    vqa = load_vqa(args.vqa_ckpt)
    cfg = TrainConfig(mode=args.mode, xi=args.xi, epochs=args.epochs, batch_size=args.batch_size,
                      lr=args.lr, seed=args.seed, w_f=args.w_f, audit_every=args.audit_every,
                      grad_clip=args.grad_clip)
    trainer = ExplainerTrainer(ds.items, ds.vocab, vqa, cfg)
    model, report = trainer.fit()
    out = out_path(args.out)
    dhash = file_hash(args.data)
    save_checkpoint(model, out / "explainer", "explainer", asdict(trainer.explainer_cfg),
                    {"train": asdict(cfg), "dataset_hash": dhash,
                     "vqa_ckpt": str(Path(args.vqa_ckpt).resolve())})
    counts = score_histogram(report.last_scores)
    write_histogram_csv(counts, out / "train_histogram.csv")
    write_histogram_svg(counts, out / "train_histogram.svg", f"training S_f ({cfg.mode})")
    report.checkpoints.append(str(out / "explainer"))
    body = {"provenance": provenance(args, {"train": asdict(cfg),
                                            "explainer": asdict(trainer.explainer_cfg)}, dhash),
            "mode": cfg.mode, "report": report.to_json()}
    body["report"].pop("last_scores")
    dump_json(body, out / "report.json")
    final = report.epochs[-1]
    print(json.dumps({"checkpoint": str(out / "explainer"),
                      "accepted_fraction": final["accepted_fraction"],
                      "mean_s_f": final["mean_s_f"]}, sort_keys=True))
    return 0


def cmd_explain(args) -> int:
    ds = read_dataset(args.data)
    model, vqa, _ = load_explainer(args.ckpt, args.vqa_ckpt)
    match = [it for it in ds.items if it.item_id == args.item]
    if not match:
        raise CommandError(f"no item with id {args.item}")
    row = explain_items(vqa, model, match, ds.vocab)[0]
    out = out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    linker.render(row["multimodal"], out, args.render)
    print(json.dumps({"item": args.item, "explanation": " ".join(
        t.word for t in row["multimodal"].tokens), "s_f": row["s_f"],
        "links": sorted(row["output"].links), "out": str(out)}, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    ds = read_dataset(args.data)
    model, vqa, manifest = load_explainer(args.ckpt, args.vqa_ckpt)
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    unknown = set(metrics) - {"bleu4", "rougeL", "cider", "emd"}
    if unknown:
        raise CommandError(f"unknown metrics: {sorted(unknown)}")
    items = split_items(ds, args.split)
    result = evaluate(vqa, model, items, ds.vocab, lime=False, metrics=metrics)
    dhash = file_hash(args.data)
    body = {"provenance": provenance(args, {"explainer": manifest["config"],
                                            "train": manifest["extra"].get("train")}, dhash),
            "mode": (manifest["extra"].get("train") or {}).get("mode"), **result}
    out = out_path(args.out)
    dump_json(body, out)
    counts = [r[2] for r in result["faithfulness"]["histogram"]]
    write_histogram_csv(counts, out.with_suffix(".histogram.csv"))
    write_histogram_svg(counts, out.with_suffix(".histogram.svg"), "test-time S_f")
    print(json.dumps({"out": str(out), "text": result["text"], "emd": result.get("emd"),
                      "mean_s_f": result["faithfulness"]["mean_s_f"]}, sort_keys=True))
    return 0


def cmd_audit_lime(args) -> int:
    ds = read_dataset(args.data)
    model, vqa, manifest = load_explainer(args.ckpt, args.vqa_ckpt)
    Ks = tuple(int(k) for k in args.K.split(","))
    items = split_items(ds, args.split)
    rows = explain_items(vqa, model, items, ds.vocab)
    result = lime_scores(vqa, rows, Ks, args.samples, args.p_blind, args.seed, args.max_items)
    dhash = file_hash(args.data)
    body = {"provenance": provenance(args, {"explainer": manifest["config"],
                                            "train": manifest["extra"].get("train"),
                                            "lime": {"samples": args.samples,
                                                     "p_blind": args.p_blind, "K": list(Ks)}},
                                     dhash),
            "mode": (manifest["extra"].get("train") or {}).get("mode"), "lime": result}
    dump_json(body, out_path(args.out))
    print(json.dumps({"out": str(out_path(args.out)), "summary": result["summary"]},
                     sort_keys=True))
    return 0


def _report_row(name: str, body: dict) -> dict:
    row = {"run": name, "mode": body.get("mode")}
    if "text" in body:
        row.update({k: body["text"].get(k) for k in ("bleu4", "rougeL", "cider")})
    if "emd" in body:
        row["emd"] = body["emd"]
    if "faithfulness" in body:
        row["mean_s_f"] = body["faithfulness"]["mean_s_f"]
        row["frac_low"] = body["faithfulness"]["frac_low"]
    if "lime" in body:
        for k, v in body["lime"]["summary"].items():
            row[f"agreement_{k}"] = v["mean"]
    if "report" in body:
        last = body["report"]["epochs"][-1]
        row["accepted_fraction"] = last["accepted_fraction"]
        row["train_mean_s_f"] = last["mean_s_f"]
    return row


def cmd_report(args) -> int:
    bodies = []
    for p in args.inputs:
        try:
            bodies.append((p, json.loads(Path(p).read_text())))
        except (OSError, json.JSONDecodeError) as e:
            raise CommandError(f"cannot read {p}: {e}") from None
    hashes = {b.get("provenance", {}).get("dataset_hash") for _, b in bodies}
    if len(hashes) != 1 or None in hashes:
        raise CommandError(f"refusing to merge artifacts from different datasets: "
                           f"{sorted(str(h) for h in hashes)}")
    rows = [_report_row(str(p), b) for p, b in bodies]
    columns = sorted({k for r in rows for k in r} - {"run", "mode"})
    table = {"dataset_hash": hashes.pop(), "columns": ["run", "mode"] + columns, "rows": rows,
             "sources": [{"path": str(p), "config_hash": b.get("provenance", {})
                          .get("config_hash")} for p, b in bodies]}
    if args.out:
        dump_json(table, out_path(args.out))
    width = max(len(c) for c in table["columns"])
    for r in rows:
        print(" | ".join(f"{c}={_fmt(r.get(c))}" for c in table["columns"]).ljust(width))
    return 0


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="faithvqa", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a toy dataset (JSONL)")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--p-distractor", type=float, default=0.5)
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    v = sub.add_parser("train-vqa", help="pretrain and freeze the answering model")
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--epochs", type=int, default=VQATrainConfig.epochs)
    v.add_argument("--lr", type=float, default=VQATrainConfig.lr)
    v.add_argument("--batch-size", type=int, default=VQATrainConfig.batch_size)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_train_vqa)

    t = sub.add_parser("train-explainer", help="train the explanation module")
    t.add_argument("--mode", choices=("random", "filtered", "filtered_lf"), required=True)
    t.add_argument("--xi", type=float, default=TrainConfig.xi)
    t.add_argument("--data", required=True)
    t.add_argument("--vqa-ckpt", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--lr", type=float, default=TrainConfig.lr)
    t.add_argument("--w-f", type=float, default=TrainConfig.w_f)
    t.add_argument("--grad-clip", type=float, default=TrainConfig.grad_clip)
    t.add_argument("--audit-every", type=int, default=TrainConfig.audit_every)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train_explainer)

    e = sub.add_parser("explain", help="explain one item and render it")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--vqa-ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--item", type=int, required=True)
    e.add_argument("--render", choices=("svg", "json"), default="svg")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_explain)

    ev = sub.add_parser("evaluate", help="text metrics, EMD and test-time faithfulness")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--vqa-ckpt")
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test", choices=("train", "test", "all"))
    ev.add_argument("--metrics", default="bleu4,rougeL,cider,emd")
    ev.add_argument("--out", required=True)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("audit-lime", help="LIME agreement of the linked objects")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--vqa-ckpt")
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="test", choices=("train", "test", "all"))
    a.add_argument("--K", default="1,2,3")
    a.add_argument("--samples", type=int, default=256)
    a.add_argument("--p-blind", type=float, default=0.4)
    a.add_argument("--max-items", type=int)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_audit_lime)

    r = sub.add_parser("report", help="merge JSON artifacts into one comparison table")
    r.add_argument("--in", dest="inputs", nargs="+", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except Exception as e:  # machine-readable failure
        print(json.dumps({"error": type(e).__name__, "message": str(e)}, sort_keys=True),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
