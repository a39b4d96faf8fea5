"""Command-line entry points. Every subcommand prints a one-line JSON summary."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import PRESETS, ConfigError, RunConfig, from_dict, load_config
from .data import DatasetError, save_dataset
from .persistence import CheckpointError, load_checkpoint, save_checkpoint
from .rng import Rng
from .training import (ablation_compare, build_tokenizer, evaluate_metrics, export_attention, export_embeddings,
                       finetune_classifier, init_state, linear_probe, load_state, predict_classes, pretrain,
                       save_state, tokenizer_arrays, tokenizer_from_checkpoint)
from .workflow import experiment_data, full_pipeline_gradcheck, labeled_split, pretrain_samples, synthetic_corpus

log = logging.getLogger("nucleimim")


class RunDirLocked(RuntimeError):
    pass


@contextmanager
def run_directory(out: Path, cfg: RunConfig):
    """Own ``out`` for the duration of a command: lock file plus a copy of the resolved config."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        owner = lock.read_text().strip() or "?"
        raise RunDirLocked(f"run directory {out} is locked by pid {owner}; remove {lock} if that run is dead") \
            from None
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        (out / "config.json").write_text(cfg.to_json())
        yield out
    finally:
        lock.unlink(missing_ok=True)


def parse_set(items: list[str]) -> dict:
    """``a.b=value`` pairs into a nested dict; values are JSON when they parse, strings otherwise."""
    tree: dict = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError("--set", f"expected KEY=VALUE, got {item!r}")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = val
    return tree


def resolve_config(args) -> RunConfig:
    overrides = parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, args.preset, overrides)


def load_params(path: str, cfg: RunConfig) -> tuple[dict[str, Tensor], RunConfig]:
    """Parameters of a checkpoint; the model section of the run config follows the checkpoint."""
    ckpt = load_checkpoint(path)
    saved = from_dict(ckpt.config)
    cfg = from_dict({"model": saved.to_dict()["model"]}, cfg)
    with ad.precision(cfg.precision):
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in ckpt.group("param").items()}
    if not params:
        raise CheckpointError(f"{path} holds no model parameters")
    return params, cfg


def _split(cfg: RunConfig, name: str):
    train, test = labeled_split(cfg, cfg.seed)
    return {"train": train, "test": test, "all": train + test}[name]


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, cfg: RunConfig, out: Path) -> dict:
    pre, pre_manifest = synthetic_corpus(cfg, cfg.seed, "pretrain")
    lab, lab_manifest = synthetic_corpus(cfg, cfg.seed, "labeled")
    n_train = int(round(len(lab) * cfg.data.train_fraction))
    save_dataset(pre, out / "pretrain", manifest=pre_manifest)
    save_dataset(lab[:n_train], out / "labeled", "train")
    save_dataset(lab[n_train:], out / "labeled", "test")
    (out / "labeled" / "manifest.json").write_text(json.dumps(lab_manifest, indent=1))
    return {"pretrain_images": len(pre), "train_images": n_train, "test_images": len(lab) - n_train,
            "nuclei": sum(len(s.boxes) for s in pre + lab), "path": str(out)}


def cmd_train_tokenizer(args, cfg: RunConfig, out: Path) -> dict:
    samples = pretrain_samples(cfg, cfg.seed)
    tok = build_tokenizer(cfg, samples, Rng(cfg.seed).child("tokenizer"))
    arrays, meta = tokenizer_arrays(tok)
    save_checkpoint(out / "tokenizer", arrays, cfg.to_dict(), {"tokenizer": meta})
    summary = {"kind": meta["kind"], "vocab_size": meta["vocab_size"], "path": str(out / "tokenizer")}
    if meta["kind"] == "vq":
        summary.update(dim=meta["dim"], iterations=tok.codebook.iterations, final_inertia=meta["inertia_trace"][-1])
    return summary


def cmd_pretrain(args, cfg: RunConfig, out: Path) -> dict:
    samples = pretrain_samples(cfg, cfg.seed)
    if args.resume:
        state = load_state(args.resume)
        state.cfg = from_dict({"train": {"epochs": cfg.train.epochs}}, state.cfg)
    else:
        tok = tokenizer_from_checkpoint(load_checkpoint(args.tokenizer)) if args.tokenizer else None
        state = init_state(cfg, samples, cfg.seed, tokenizer=tok)
    state = pretrain(state.cfg, samples, seed=cfg.seed, out_dir=out, state=state, epochs=args.epochs)
    if not state.trace:
        save_state(state, out / "checkpoint", cfg.seed)
    first, last = (state.trace[0]["loss"], state.trace[-1]["loss"]) if state.trace else (None, None)
    return {"epochs": state.epoch, "first_loss": first, "final_loss": last,
            "ratio": None if first is None else last / first, "checkpoint": str(out / "checkpoint")}


def cmd_probe(args, cfg: RunConfig, out: Path) -> dict:
    params, cfg = load_params(args.checkpoint, cfg)
    train, test = labeled_split(cfg, cfg.seed)
    res = linear_probe(params, cfg, train, test, cfg.data.n_classes)
    (out / "probe_metrics.json").write_text(json.dumps(res.metrics.to_dict(), indent=1))
    save_checkpoint(out / "probe", {"probe/weight": res.weight, "probe/bias": res.bias}, cfg.to_dict())
    return {"accuracy": res.metrics.accuracy, "macro_f1": res.metrics.macro_f1,
            "test_nuclei": int(res.metrics.support.sum())}


def cmd_finetune(args, cfg: RunConfig, out: Path) -> dict:
    params, cfg = load_params(args.checkpoint, cfg)
    train, test = labeled_split(cfg, cfg.seed)
    res = finetune_classifier(params, cfg, train, test, cfg.seed, cfg.data.n_classes)
    (out / "finetune_metrics.json").write_text(json.dumps(res.metrics.to_dict(), indent=1))
    save_checkpoint(out / "checkpoint", {f"param/{k}": p.data for k, p in res.params.items()}, cfg.to_dict(),
                    {"probe_accuracy": None if res.probe is None else res.probe.metrics.accuracy})
    return {"accuracy": res.metrics.accuracy, "macro_f1": res.metrics.macro_f1,
            "probe_accuracy": None if res.probe is None else res.probe.metrics.accuracy,
            "checkpoint": str(out / "checkpoint")}


def cmd_eval(args, cfg: RunConfig, out: Path) -> dict:
    params, cfg = load_params(args.checkpoint, cfg)
    if "cls_w" not in params:
        raise CheckpointError(f"{args.checkpoint} has no classifier; run finetune first")
    samples = _split(cfg, args.split)
    labels = [b.label for s in samples for b in s.boxes[:cfg.model.n_max]]
    if not labels or any(l is None for l in labels):
        raise ValueError("eval needs a labelled dataset (every box must carry a class label)")
    metrics = evaluate_metrics(predict_classes(params, cfg, samples), labels, cfg.data.n_classes)
    (out / "eval_metrics.json").write_text(json.dumps(metrics.to_dict(), indent=1))
    return {"split": args.split, "accuracy": metrics.accuracy, "macro_f1": metrics.macro_f1}


def cmd_ablate(args, cfg: RunConfig, out: Path) -> dict:
    with open(out / "ablation_runs.jsonl", "w") as fh:
        def record(run):
            fh.write(json.dumps(run) + "\n")
            fh.flush()
        report = ablation_compare(cfg, args.seeds, lambda seed: experiment_data(cfg, seed), record)
    save_checkpoint(out / "report", {}, cfg.to_dict(), {"report": report})
    (out / "ablation_report.json").write_text(json.dumps(report, indent=1))
    return {"seeds": report["seeds"], "mean_with_inst": report["mean_with_inst"],
            "mean_without_inst": report["mean_without_inst"], "difference": report["difference"],
            "all_same_init": report["all_same_init"]}


def cmd_export_embeddings(args, cfg: RunConfig, out: Path) -> dict:
    params, cfg = load_params(args.checkpoint, cfg)
    samples = _split(cfg, args.split)
    path = out / "embeddings.csv"
    text = export_embeddings(params, cfg, samples, path)
    return {"rows": text.count("\n") - 1, "dim": cfg.model.dim, "path": str(path)}


def cmd_export_attention(args, cfg: RunConfig, out: Path) -> dict:
    params, cfg = load_params(args.checkpoint, cfg)
    samples = _split(cfg, args.split)
    if not 0 <= args.sample < len(samples):
        raise IndexError(f"sample {args.sample} outside [0, {len(samples)})")
    res = export_attention(params, cfg, samples[args.sample], args.layer, args.head, args.query)
    path = out / "attention.json"
    payload = {"sample_id": samples[args.sample].source_id, "layer": args.layer, "head": args.head,
               "query": args.query, "cls": res["cls"], "grid": res["grid"].tolist(),
               "instances": res["instances"].tolist()}
    path.write_text(json.dumps(payload, indent=1))
    total = res["cls"] + float(res["grid"].sum()) + float(res["instances"].sum())
    return {"sample_id": payload["sample_id"], "query_position": res["query_position"],
            "weight_sum": total, "path": str(path)}


def cmd_gradcheck(args, cfg: RunConfig, out: Path) -> dict:
    rep = full_pipeline_gradcheck(cfg, cfg.seed, coords_per_tensor=args.coords)
    (out / "gradcheck.json").write_text(json.dumps({k: float(v) for k, v in rep.per_tensor.items()}, indent=1))
    return rep.to_dict()


COMMANDS = {
    "gen-data": cmd_gen_data, "train-tokenizer": cmd_train_tokenizer, "pretrain": cmd_pretrain,
    "probe": cmd_probe, "finetune": cmd_finetune, "eval": cmd_eval, "ablate": cmd_ablate,
    "export-embeddings": cmd_export_embeddings, "export-attention": cmd_export_attention,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default: the file's, else desk)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="run directory (default runs/<command>)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field, e.g. --set train.epochs=5")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="nucleimim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    p = {name: sub.add_parser(name, parents=[common]) for name in COMMANDS}
    p["pretrain"].add_argument("--tokenizer", help="tokenizer checkpoint from train-tokenizer")
    p["pretrain"].add_argument("--resume", help="continue from a pretraining checkpoint")
    p["pretrain"].add_argument("--epochs", type=int, help="run this many more epochs instead of train.epochs")
    for name in ("probe", "finetune", "eval", "export-embeddings", "export-attention"):
        p[name].add_argument("--checkpoint", required=True)
    for name in ("eval", "export-embeddings", "export-attention"):
        p[name].add_argument("--split", choices=("train", "test", "all"), default="test")
    p["ablate"].add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p["export-attention"].add_argument("--sample", type=int, default=0, help="index into the split")
    p["export-attention"].add_argument("--layer", type=int, default=0)
    p["export-attention"].add_argument("--head", type=int, default=0)
    p["export-attention"].add_argument("--query", default="cls", help="cls, grid:<i> or instance:<j>")
    p["gradcheck"].add_argument("--coords", type=int, default=4, help="coordinates perturbed per tensor")
    return parser


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out or Path("runs") / args.command)
        with run_directory(out, cfg):
            summary = COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc.strerror}: {exc.filename}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, RunDirLocked, ad.NonFiniteError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **_jsonable(summary)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
