"""Pretraining loop, linear probing, fine-tuning, metrics, ablation and exports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .config import RunConfig, from_dict
from .data import AnnotatedSample, AugConfig, augment, normalize
from .model import Batch, Params, encoder_param_names, forward, init_params, split_outputs
from .objective import build_targets, mim_step_loss
from .patching import blockwise_mask
from .persistence import Checkpoint, load_checkpoint, save_checkpoint
from .rng import Rng
from .tokenizer import (Codebook, LuminanceTokenizer, VQTokenizer, collect_training_cells, tokenize_image,
                        tokenize_instance, train_vq_codebook)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimiser

class AdamW:
    """Adam with decoupled weight decay (matrices only) and linear warmup."""

    def __init__(self, params: Params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, warmup_steps=0):
        self.params = params
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.weight_decay, self.warmup_steps = weight_decay, warmup_steps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        lr = self.lr * (min(1.0, self.t / self.warmup_steps) if self.warmup_steps else 1.0)
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= (1.0 - lr * self.weight_decay)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt/m/{k}": v for k, v in self.m.items()}
        out.update({f"opt/v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, ckpt: Checkpoint, t: int):
        m, v = ckpt.group("opt/m"), ckpt.group("opt/v")
        for k in self.params:
            if k in m:
                self.m[k] = m[k].astype(self.params[k].data.dtype)
                self.v[k] = v[k].astype(self.params[k].data.dtype)
        self.t = t


# ---------------------------------------------------------------------------
# tokenizer and batches

def build_tokenizer(cfg: RunConfig, samples: Sequence[AnnotatedSample], rng: Rng):
    m = cfg.model
    if cfg.tokenizer.kind == "luminance":
        return LuminanceTokenizer(m.vocab_size)
    use = list(samples[:cfg.tokenizer.train_images])
    boxes = [s.boxes[:m.n_max] for s in use]
    size = cfg.tokenizer.cell_size or m.patch_size
    cells = collect_training_cells([s.image for s in use], (m.grid, m.grid), boxes, cell_size=size,
                                   t=m.inst_tokens)
    if cells.shape[0] > cfg.tokenizer.max_cells:
        cells = cells[np.sort(rng.child("subsample").choice(cells.shape[0], cfg.tokenizer.max_cells, replace=False))]
    book = train_vq_codebook(cells, m.vocab_size, cfg.tokenizer.iterations, rng.child("kmeans"), size)
    return VQTokenizer(book)


def tokenizer_arrays(tok) -> tuple[dict, dict]:
    if isinstance(tok, VQTokenizer):
        return ({"tokenizer/centroids": tok.codebook.centroids},
                {"kind": "vq", "cell_size": tok.codebook.cell_size, "vocab_size": tok.vocab_size,
                 "dim": tok.codebook.dim, "inertia_trace": tok.codebook.inertia_trace})
    return {}, {"kind": "luminance", "vocab_size": tok.vocab_size}


def tokenizer_from_checkpoint(ckpt: Checkpoint):
    info = ckpt.meta.get("tokenizer", {})
    if info.get("kind") == "vq":
        return VQTokenizer(Codebook(ckpt.arrays["tokenizer/centroids"], info["cell_size"], 0,
                                    info.get("inertia_trace", [])))
    return LuminanceTokenizer(info.get("vocab_size", ckpt.config["model"]["vocab_size"]))


def aug_config(cfg: RunConfig) -> AugConfig | None:
    a = cfg.augment
    if not a.enabled:
        return None
    return AugConfig(crop_scale=tuple(a.crop_scale) if a.crop_scale else None, hflip=a.hflip, vflip=a.vflip,
                     color_jitter=a.color_jitter, patch_size=cfg.model.patch_size)


def _fit(sample: AnnotatedSample, cfg: RunConfig) -> AnnotatedSample:
    from .data import resize_sample
    s = cfg.model.image_size
    if sample.image.shape[:2] != (s, s):
        sample = resize_sample(sample, s, s)
    if len(sample.boxes) > cfg.model.n_max:
        sample = replace(sample, boxes=sample.boxes[:cfg.model.n_max],
                         centroids=None if sample.centroids is None else sample.centroids[:cfg.model.n_max])
    return sample


def make_batch(samples: Sequence[AnnotatedSample], cfg: RunConfig) -> Batch:
    fitted = [_fit(s, cfg) for s in samples]
    images = np.stack([normalize(s.image) for s in fitted]).astype(ad.get_default_dtype())
    return Batch(images, [s.box_array() for s in fitted])


@dataclass
class PretrainBatch:
    batch: Batch
    targets: object


def prepare_pretrain_batch(samples: Sequence[AnnotatedSample], cfg: RunConfig, tokenizer, rng: Rng) -> PretrainBatch:
    """augment -> tokenise targets from pixels -> normalise -> blockwise mask."""
    m = cfg.model
    aug = aug_config(cfg)
    ready = []
    for i, s in enumerate(samples):
        s = _fit(s, cfg)
        if aug is not None:
            s = _fit(augment(s, rng.child(f"aug{i}"), aug), cfg)
        ready.append(s)
    grid_tokens = np.stack([tokenize_image(s.image, (m.grid, m.grid), tokenizer).reshape(-1) for s in ready])
    inst_tokens = [np.array([tokenize_instance(s.image, b, tokenizer, m.inst_tokens).reshape(-1) for b in s.boxes],
                            dtype=np.int64).reshape(-1, m.inst_tokens ** 2) for s in ready]
    masks = np.stack([blockwise_mask(m.grid, m.grid, cfg.mask.ratio, cfg.mask.min_block, cfg.mask.max_block,
                                     rng.child(f"mask{i}")) for i in range(len(ready))])
    batch = Batch(np.stack([normalize(s.image) for s in ready]).astype(ad.get_default_dtype()),
                  [s.box_array() for s in ready])
    targets = build_targets(batch.boxes, masks, grid_tokens, inst_tokens, m.patch_size)
    return PretrainBatch(batch, targets)


# ---------------------------------------------------------------------------
# pretraining

@dataclass
class PretrainState:
    cfg: RunConfig
    params: Params
    optimizer: AdamW
    tokenizer: object
    epoch: int = 0
    trace: list[dict] = field(default_factory=list)
    init_digest: str = ""


def params_digest(params: Params) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


def init_state(cfg: RunConfig, samples: Sequence[AnnotatedSample], seed: int | None = None,
               tokenizer=None) -> PretrainState:
    """Fresh parameters and optimiser; the tokenizer is fit on ``samples`` unless one is given."""
    seed = cfg.seed if seed is None else seed
    root = Rng(seed)
    with ad.precision(cfg.precision):
        params = init_params(cfg.model, root.child("init"))
        o = cfg.optim
        opt = AdamW(params, o.lr, o.betas, o.eps, o.weight_decay, o.warmup_steps)
    tok = tokenizer if tokenizer is not None else build_tokenizer(cfg, samples, root.child("tokenizer"))
    return PretrainState(cfg, params, opt, tok, 0, [], params_digest(params))


def _schedule_pool(datasets: dict[str, Sequence[AnnotatedSample]], schedule: list[dict], epoch: int):
    if not schedule:
        pool = []
        for name in sorted(datasets):
            pool.extend(datasets[name])
        return pool
    pool = []
    for entry in schedule:
        if entry.get("start_epoch", 0) <= epoch:
            pool.extend(datasets[entry["dataset"]])
    return pool


def run_epoch(state: PretrainState, datasets, seed: int) -> dict:
    cfg = state.cfg
    e = state.epoch
    rng = Rng(seed).child(f"epoch{e}")
    pool = _schedule_pool(datasets, cfg.data.schedule, e)
    order = rng.child("order").permutation(len(pool))
    bs = cfg.train.batch_size
    weight = cfg.train.inst_loss_weight if cfg.train.use_inst_loss else 0.0
    totals = np.zeros(3)
    images = 0
    with ad.precision(cfg.precision):
        for j, start in enumerate(range(0, len(pool), bs)):
            chunk = [pool[i] for i in order[start:start + bs]]
            pb = prepare_pretrain_batch(chunk, cfg, state.tokenizer, rng.child(f"batch{j}"))
            state.optimizer.zero_grad()
            out = mim_step_loss(state.params, cfg.model, pb.batch, pb.targets, weight)
            value = out.loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {e} step {j}: loss={value}, "
                                     f"beit={out.beit_term}, inst={out.inst_term}")
            out.loss.backward()
            state.optimizer.step()
            n = len(chunk)
            totals += np.array([value * n, out.beit_term, out.inst_term])
            images += n
    state.epoch += 1
    rec = {"epoch": state.epoch, "loss": float(totals[0] / images), "beit_term": float(totals[1] / images),
           "inst_term": float(totals[2] / images)}
    state.trace.append(rec)
    return rec


def pretrain(cfg: RunConfig, datasets: dict[str, Sequence[AnnotatedSample]] | Sequence[AnnotatedSample],
             seed: int | None = None, out_dir: str | Path | None = None, state: PretrainState | None = None,
             epochs: int | None = None, on_epoch: Callable[[dict], None] | None = None) -> PretrainState:
    """Run (or continue) MIM pretraining; returns the final state with its loss trace.

    With ``out_dir`` a JSON-lines trace and a checkpoint per epoch are written.
    """
    if not isinstance(datasets, dict):
        datasets = {"pretrain": list(datasets)}
    seed = cfg.seed if seed is None else seed
    if state is None:
        first = _schedule_pool(datasets, cfg.data.schedule, 0)
        state = init_state(cfg, first, seed)
    target = cfg.train.epochs if epochs is None else state.epoch + epochs
    out = Path(out_dir) if out_dir else None
    while state.epoch < target:
        rec = run_epoch(state, datasets, seed)
        log.info("epoch %d loss %.4f (beit %.3f, inst %.3f)", rec["epoch"], rec["loss"], rec["beit_term"],
                 rec["inst_term"])
        if on_epoch:
            on_epoch(rec)
        if out:
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "trace.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            save_state(state, out / "checkpoint", seed)
    return state


def save_state(state: PretrainState, path: str | Path, seed: int | None = None, extra: dict | None = None) -> Path:
    arrays = {f"param/{k}": p.data for k, p in state.params.items()}
    arrays.update(state.optimizer.state_arrays())
    tok_arrays, tok_meta = tokenizer_arrays(state.tokenizer)
    arrays.update(tok_arrays)
    meta = {"epoch": state.epoch, "opt_step": state.optimizer.t, "trace": state.trace, "tokenizer": tok_meta,
            "seed": state.cfg.seed if seed is None else seed, "init_digest": state.init_digest}
    meta.update(extra or {})
    return save_checkpoint(path, arrays, state.cfg.to_dict(), meta)


def load_state(path: str | Path) -> PretrainState:
    ckpt = load_checkpoint(path)
    cfg = from_dict(ckpt.config)
    with ad.precision(cfg.precision):
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in ckpt.group("param").items()}
        o = cfg.optim
        opt = AdamW(params, o.lr, o.betas, o.eps, o.weight_decay, o.warmup_steps)
        opt.load_state(ckpt, ckpt.meta.get("opt_step", 0))
    return PretrainState(cfg, params, opt, tokenizer_from_checkpoint(ckpt), ckpt.meta.get("epoch", 0),
                         list(ckpt.meta.get("trace", [])), ckpt.meta.get("init_digest", ""))


# ---------------------------------------------------------------------------
# metrics

@dataclass
class Metrics:
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro_f1: float
    loss_trace: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "f1": self.f1.tolist(),
                "precision": self.precision.tolist(), "recall": self.recall.tolist(),
                "support": self.support.tolist(), "confusion": self.confusion.tolist(),
                "loss_trace": list(self.loss_trace)}


def evaluate_metrics(predictions, labels, n_classes: int | None = None) -> Metrics:
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.size == 0:
        raise ValueError("evaluate_metrics needs at least one prediction")
    if pred.shape != lab.shape:
        raise ValueError(f"{pred.size} predictions for {lab.size} labels")
    k = n_classes or int(max(pred.max(), lab.max()) + 1)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (lab, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    col, row = conf.sum(0), conf.sum(1)
    prec = np.divide(tp, col, out=np.zeros(k), where=col > 0)
    rec = np.divide(tp, row, out=np.zeros(k), where=row > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros(k), where=denom > 0)
    return Metrics(conf, prec, rec, f1, row, float(tp.sum() / conf.sum()), float(f1.mean()))


# ---------------------------------------------------------------------------
# nuclei representations

@dataclass
class NucleiTable:
    features: np.ndarray
    labels: np.ndarray
    sample_ids: list[str]
    box_index: np.ndarray


def extract_nuclei(params: Params, cfg: RunConfig, samples: Sequence[AnnotatedSample], batch_size: int = 32) -> NucleiTable:
    feats, labels, ids, bidx = [], [], [], []
    with ad.precision(cfg.precision):
        for start in range(0, len(samples), batch_size):
            chunk = [_fit(s, cfg) for s in samples[start:start + batch_size]]
            res = forward(params, cfg.model, make_batch(chunk, cfg))
            _, _, nuclei = split_outputs(res.sequence)
            for s, rep in zip(chunk, nuclei):
                feats.append(np.asarray(rep, dtype=np.float64))
                labels.extend(-1 if b.label is None else b.label for b in s.boxes)
                ids.extend([s.source_id] * len(s.boxes))
                bidx.extend(range(len(s.boxes)))
    d = cfg.model.dim
    return NucleiTable(np.concatenate(feats) if feats else np.zeros((0, d)), np.array(labels, dtype=np.int64),
                       ids, np.array(bidx, dtype=np.int64))


def _require_labels(table: NucleiTable, what: str):
    if table.labels.size == 0 or (table.labels < 0).any():
        raise ValueError(f"{what} needs a labelled dataset (every box must carry a class label)")


def fit_softmax_regression(x: np.ndarray, y: np.ndarray, n_classes: int, l2: float = 1e-3,
                           max_iter: int = 500, sample_weight: np.ndarray | None = None):
    """Multinomial logistic regression by L-BFGS; returns (W (d, C), b (C,))."""
    n, d = x.shape
    w_s = np.ones(n) if sample_weight is None else sample_weight
    onehot = np.eye(n_classes)[y]

    def obj(theta):
        w = theta[:d * n_classes].reshape(d, n_classes)
        b = theta[d * n_classes:]
        z = x @ w + b
        z -= z.max(1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        loss = -(w_s * (onehot * logp).sum(1)).sum() / n + 0.5 * l2 * (w * w).sum()
        g = (np.exp(logp) - onehot) * w_s[:, None] / n
        gw = x.T @ g + l2 * w
        return loss, np.concatenate([gw.reshape(-1), g.sum(0)])

    theta0 = np.zeros(d * n_classes + n_classes)
    res = minimize(obj, theta0, jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
    return res.x[:d * n_classes].reshape(d, n_classes), res.x[d * n_classes:]


@dataclass
class ProbeResult:
    metrics: Metrics
    weight: np.ndarray      # acts on raw nuclei features
    bias: np.ndarray
    n_classes: int
    feature_mean: np.ndarray | None = None
    feature_scale: np.ndarray | None = None


def linear_probe(params: Params, cfg: RunConfig, train: Sequence[AnnotatedSample], test: Sequence[AnnotatedSample],
                 n_classes: int | None = None) -> ProbeResult:
    """Frozen encoder; only a C-way affine map on nuclei representations is trained."""
    tr = extract_nuclei(params, cfg, train)
    te = extract_nuclei(params, cfg, test)
    _require_labels(tr, "linear_probe")
    _require_labels(te, "linear_probe")
    k = n_classes or int(max(tr.labels.max(), te.labels.max()) + 1)
    mu = tr.features.mean(0)
    sd = tr.features.std(0) + 1e-6
    w, b = fit_softmax_regression((tr.features - mu) / sd, tr.labels, k, cfg.probe.l2, cfg.probe.max_iter)
    # fold the standardisation into the affine map
    w_raw = w / sd[:, None]
    b_raw = b - mu @ w_raw
    pred = (te.features @ w_raw + b_raw).argmax(1)
    return ProbeResult(evaluate_metrics(pred, te.labels, k), w_raw, b_raw, k, mu, sd)


def classifier_logits(params: Params, cfg: RunConfig, batch: Batch) -> Tensor:
    res = forward(params, cfg.model, batch)
    tok = res.sequence.tokens
    b, _, d = tok.shape
    l = cfg.model.n_grid
    counts = batch.counts()
    picks = np.concatenate([i * cfg.model.n_max + np.arange(n) for i, n in enumerate(counts)]) if counts.sum() \
        else np.zeros(0, np.int64)
    rows = tok[:, 1 + l:].reshape(b * cfg.model.n_max, d)[picks]
    if "cls_mu" in params:
        # frozen standardisation in front of the head, fixed from the training features
        rows = (rows - params["cls_mu"]) * (1.0 / params["cls_sd"].data)
    return rows @ params["cls_w"] + params["cls_b"]


@dataclass
class FinetuneResult:
    metrics: Metrics
    params: Params
    probe: ProbeResult | None


def finetune_classifier(params: Params, cfg: RunConfig, train: Sequence[AnnotatedSample],
                        test: Sequence[AnnotatedSample], seed: int | None = None,
                        n_classes: int | None = None) -> FinetuneResult:
    """All encoder weights plus a softmax classifier on nuclei representations; MIM heads dropped."""
    ft = cfg.finetune
    seed = cfg.seed if seed is None else seed
    labels_tr = [b.label for s in train for b in _fit(s, cfg).boxes]
    labels_te = [b.label for s in test for b in _fit(s, cfg).boxes]
    if not labels_tr or any(l is None for l in labels_tr + labels_te):
        raise ValueError("finetune_classifier needs a labelled dataset (every box must carry a class label)")
    k = n_classes or int(max(labels_tr + labels_te) + 1)
    probe = linear_probe(params, cfg, train, test, k) if ft.init_from_probe else None
    with ad.precision(cfg.precision):
        dt = ad.get_default_dtype()
        model = {n: Tensor(params[n].data.copy(), requires_grad=True, name=n) for n in encoder_param_names(params)}
        if probe is not None:
            mu, sd = probe.feature_mean, probe.feature_scale
            # the probe's map re-expressed on standardised features
            w0, b0 = probe.weight * sd[:, None], probe.bias + mu @ probe.weight
        else:
            feats = extract_nuclei(params, cfg, train).features
            mu, sd = feats.mean(0), feats.std(0) + 1e-6
            w0, b0 = np.zeros((cfg.model.dim, k)), np.zeros(k)
        model["cls_w"] = Tensor(w0.astype(dt), requires_grad=True, name="cls_w")
        model["cls_b"] = Tensor(b0.astype(dt), requires_grad=True, name="cls_b")
        model["cls_mu"] = Tensor(mu.astype(dt), name="cls_mu")
        model["cls_sd"] = Tensor(sd.astype(dt), name="cls_sd")
        opt = AdamW(model, ft.lr, cfg.optim.betas, cfg.optim.eps, ft.weight_decay, ft.warmup_steps)
        class_w = None
        if ft.class_weighting:
            freq = np.bincount(labels_tr, minlength=k).astype(np.float64)
            class_w = np.where(freq > 0, freq.sum() / (k * np.maximum(freq, 1)), 0.0)
        rng = Rng(seed).child("finetune")
        trace = []
        for epoch in range(ft.epochs):
            order = rng.child(f"epoch{epoch}").permutation(len(train))
            total, count = 0.0, 0
            for start in range(0, len(train), ft.batch_size):
                chunk = [train[i] for i in order[start:start + ft.batch_size]]
                batch = make_batch(chunk, cfg)
                y = np.array([b.label for s in chunk for b in _fit(s, cfg).boxes], dtype=np.int64)
                if y.size == 0:
                    continue
                opt.zero_grad()
                logits = classifier_logits(model, cfg, batch)
                loss = ad.cross_entropy(logits, y, reduction="mean",
                                        weights=None if class_w is None else class_w[y])
                if not np.isfinite(loss.item()):
                    raise NonFiniteError(f"non-finite fine-tuning loss at epoch {epoch}")
                loss.backward()
                opt.step()
                total += loss.item() * y.size
                count += y.size
            trace.append(total / max(count, 1))
        preds = []
        for start in range(0, len(test), 32):
            chunk = test[start:start + 32]
            batch = make_batch(chunk, cfg)
            if batch.counts().sum():
                preds.append(classifier_logits(model, cfg, batch).data.argmax(1))
    metrics = evaluate_metrics(np.concatenate(preds), np.array(labels_te), k)
    metrics.loss_trace = trace
    return FinetuneResult(metrics, model, probe)


def predict_classes(params: Params, cfg: RunConfig, samples: Sequence[AnnotatedSample]) -> np.ndarray:
    preds = []
    with ad.precision(cfg.precision):
        for start in range(0, len(samples), 32):
            batch = make_batch(samples[start:start + 32], cfg)
            if batch.counts().sum():
                preds.append(classifier_logits(params, cfg, batch).data.argmax(1))
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def split_samples(samples: Sequence[AnnotatedSample], train_fraction: float):
    n = int(round(len(samples) * train_fraction))
    return list(samples[:n]), list(samples[n:])


# ---------------------------------------------------------------------------
# ablation

def ablation_compare(cfg: RunConfig, seeds: Sequence[int], make_data: Callable[[int], tuple],
                     on_run: Callable[[dict], None] | None = None) -> dict:
    """Pretrain with and without the instance term per seed and linear-probe both.

    ``make_data(seed)`` returns (pretrain_samples, probe_train, probe_test).
    The two arms share seed, data, tokenizer and initialisation.
    """
    runs = []
    for seed in seeds:
        pre, tr, te = make_data(seed)
        arm = {}
        for name, use in (("with_inst", True), ("without_inst", False)):
            c = from_dict({"train": {"use_inst_loss": use}, "seed": seed}, cfg)
            state = pretrain(c, pre, seed=seed)
            probe = linear_probe(state.params, c, tr, te, cfg.data.n_classes)
            arm[name] = {"accuracy": probe.metrics.accuracy, "macro_f1": probe.metrics.macro_f1,
                         "init_digest": state.init_digest, "final_loss": state.trace[-1]["loss"] if state.trace else None}
        rec = {"seed": seed, **arm, "same_init": arm["with_inst"]["init_digest"] == arm["without_inst"]["init_digest"]}
        runs.append(rec)
        if on_run:
            on_run(rec)
    mean_with = float(np.mean([r["with_inst"]["accuracy"] for r in runs]))
    mean_without = float(np.mean([r["without_inst"]["accuracy"] for r in runs]))
    return {"seeds": list(seeds), "runs": runs, "mean_with_inst": mean_with, "mean_without_inst": mean_without,
            "difference": mean_with - mean_without, "all_same_init": all(r["same_init"] for r in runs)}


# ---------------------------------------------------------------------------
# exports

def export_embeddings(params: Params, cfg: RunConfig, samples: Sequence[AnnotatedSample],
                      path: str | Path | None = None) -> str:
    """CSV ``sample_id,box_index,label,e0..e{D-1}``, one row per nucleus in dataset order."""
    table = extract_nuclei(params, cfg, samples) if samples else None
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    d = cfg.model.dim
    writer.writerow(["sample_id", "box_index", "label"] + [f"e{i}" for i in range(d)])
    if table is not None:
        for i in range(table.features.shape[0]):
            lab = "" if table.labels[i] < 0 else str(int(table.labels[i]))
            writer.writerow([table.sample_ids[i], int(table.box_index[i]), lab]
                            + [format(float(v), ".9g") for v in table.features[i]])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_query(query, n_grid: int, n_inst: int) -> int:
    """'cls' | 'grid:i' | 'instance:j' (or an ('grid', i) tuple) -> sequence position."""
    if isinstance(query, str):
        kind, _, idx = query.partition(":")
    else:
        kind, idx = query
    kind = kind.lower()
    if kind == "cls":
        return 0
    i = int(idx)
    if kind == "grid":
        if not 0 <= i < n_grid:
            raise IndexError(f"grid query {i} outside [0, {n_grid})")
        return 1 + i
    if kind == "instance":
        if not 0 <= i < n_inst:
            raise IndexError(f"instance query {i} outside [0, {n_inst})")
        return 1 + n_grid + i
    raise ValueError(f"unknown query token {query!r}")


def export_attention(params: Params, cfg: RunConfig, sample: AnnotatedSample, layer: int, head: int,
                     query="cls") -> dict:
    """Post-softmax attention of one query: grid part as (grid_h, grid_w), instance part per nucleus."""
    m = cfg.model
    if not 0 <= layer < m.layers:
        raise IndexError(f"layer {layer} outside [0, {m.layers})")
    if not 0 <= head < m.heads:
        raise IndexError(f"head {head} outside [0, {m.heads})")
    sample = _fit(sample, cfg)
    n = len(sample.boxes)
    pos = parse_query(query, m.n_grid, n)
    with ad.precision(cfg.precision):
        res = forward(params, m, make_batch([sample], cfg), record_attention=True)
    row = np.asarray(res.attention[layer][0, head, pos], dtype=np.float64)
    return {"cls": float(row[0]), "grid": row[1:1 + m.n_grid].reshape(m.grid, m.grid),
            "instances": row[1 + m.n_grid:1 + m.n_grid + n], "query_position": pos}
