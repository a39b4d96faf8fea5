import json
import math

import numpy as np
import pytest

from nucleimim import autodiff as ad
from nucleimim.autodiff import Tensor
from nucleimim.config import from_dict
from nucleimim.data import AnnotatedSample, NucleusBox
from nucleimim.model import encoder_param_names
from nucleimim.persistence import load_checkpoint, save_checkpoint
from nucleimim.positional import encode_geometry
from nucleimim.training import (ablation_compare, classifier_logits, evaluate_metrics, export_attention,
                                export_embeddings, extract_nuclei, finetune_classifier, fit_softmax_regression, init_state,
                                linear_probe, make_batch, params_digest, pretrain)


def test_metrics_hand_example():
    m = evaluate_metrics([0, 0], [0, 1], 2)
    assert m.accuracy == 0.5
    assert m.f1[0] == pytest.approx(2 / 3) and m.f1[1] == 0.0
    assert m.macro_f1 == pytest.approx(1 / 3)
    perfect = evaluate_metrics([2, 0, 1], [2, 0, 1])
    assert perfect.accuracy == 1.0 and (perfect.f1 == 1.0).all()
    with pytest.raises(ValueError):
        evaluate_metrics([], [])


def test_metrics_identities_and_order_invariance():
    rng = np.random.default_rng(0)
    for _ in range(20):
        y = rng.integers(0, 4, 50)
        p = rng.integers(0, 4, 50)
        m = evaluate_metrics(p, y, 4)
        assert (m.confusion.sum(1) == np.bincount(y, minlength=4)).all()
        assert m.accuracy == np.trace(m.confusion) / 50
        assert 0.0 <= m.macro_f1 <= 1.0
        perm = rng.permutation(50)
        assert evaluate_metrics(p[perm], y[perm], 4).to_dict() == m.to_dict()


def test_zero_epochs_is_initialisation(tiny_cfg, tiny_data):
    cfg = from_dict({"train": {"epochs": 0}}, tiny_cfg)
    st = pretrain(cfg, tiny_data[0], seed=3)
    assert st.trace == [] and params_digest(st.params) == st.init_digest


def test_pretrain_deterministic_and_trace_file(tiny_cfg, tiny_data, tmp_path):
    a = pretrain(tiny_cfg, tiny_data[0], seed=1, out_dir=tmp_path)
    b = pretrain(tiny_cfg, tiny_data[0], seed=1)
    assert json.dumps(a.trace) == json.dumps(b.trace)
    assert params_digest(a.params) == params_digest(b.params)
    lines = [json.loads(x) for x in (tmp_path / "trace.jsonl").read_text().splitlines()]
    assert lines == a.trace
    assert set(lines[0]) == {"epoch", "loss", "beit_term", "inst_term"}
    assert load_checkpoint(tmp_path / "checkpoint").meta["epoch"] == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts(tiny_cfg, tiny_data):
    st = init_state(tiny_cfg, tiny_data[0], 0)
    st.params["grid_head_b"].data[:] = np.inf
    with pytest.raises(ad.NonFiniteError, match="epoch 0"):
        pretrain(tiny_cfg, tiny_data[0], seed=0, state=st)


def test_probe_single_class_and_unlabelled(tiny_cfg, tiny_data):
    st = init_state(tiny_cfg, tiny_data[0], 0)
    one = [AnnotatedSample(s.image, [NucleusBox(*b.as_tuple(), label=2) for b in s.boxes], s.source_id)
           for s in tiny_data[1] + tiny_data[2]]
    res = linear_probe(st.params, tiny_cfg, one[:4], one[4:], n_classes=4)
    assert res.metrics.accuracy == 1.0
    unlabelled = [AnnotatedSample(s.image, [NucleusBox(*b.as_tuple()) for b in s.boxes]) for s in tiny_data[1]]
    with pytest.raises(ValueError, match="labelled"):
        linear_probe(st.params, tiny_cfg, unlabelled, unlabelled)


def test_softmax_regression_separable():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(-3, 1, (50, 2)), rng.normal(3, 1, (50, 2))])
    y = np.repeat([0, 1], 50)
    w, b = fit_softmax_regression(x, y, 2)
    assert ((x @ w + b).argmax(1) == y).mean() > 0.95


def test_zero_classifier_uniform(tiny_cfg, tiny_data):
    st = init_state(tiny_cfg, tiny_data[0], 0)
    params = {k: st.params[k] for k in encoder_param_names(st.params)}
    params["cls_w"] = Tensor(np.zeros((16, 4)))
    params["cls_b"] = Tensor(np.zeros(4))
    with ad.precision(np.float64):
        logits = classifier_logits(params, tiny_cfg, make_batch(tiny_data[1], tiny_cfg))
        y = np.array([b.label for s in tiny_data[1] for b in s.boxes])
        loss = ad.cross_entropy(logits, y, reduction="mean").item()
    assert loss == pytest.approx(math.log(4), rel=1e-12)


def test_finetune_runs_and_empty_image(tiny_cfg, tiny_data):
    st = init_state(tiny_cfg, tiny_data[0], 0)
    empty = AnnotatedSample(np.zeros((32, 32, 3)), [], "empty")
    train = list(tiny_data[1]) + [empty]
    res = finetune_classifier(st.params, tiny_cfg, train, tiny_data[2], seed=0, n_classes=4)
    assert len(res.metrics.loss_trace) == 2
    assert res.metrics.confusion.sum() == sum(len(s.boxes) for s in tiny_data[2])
    assert "grid_head_w" not in res.params and "cls_w" in res.params


def test_finetune_starts_from_probe(tiny_cfg, tiny_data):
    # zero epochs: the standardised head must reproduce the probe's raw-feature predictions
    st = init_state(tiny_cfg, tiny_data[0], 0)
    cfg = from_dict({"finetune": {"epochs": 0}}, tiny_cfg)
    res = finetune_classifier(st.params, cfg, tiny_data[1], tiny_data[2], seed=0, n_classes=4)
    np.testing.assert_array_equal(res.metrics.confusion, res.probe.metrics.confusion)
    with ad.precision(np.float64):
        logits = classifier_logits(res.params, cfg, make_batch(tiny_data[2], cfg)).data
    raw = extract_nuclei(st.params, cfg, tiny_data[2]).features @ res.probe.weight + res.probe.bias
    np.testing.assert_allclose(logits, raw, rtol=1e-8, atol=1e-8)


def test_ablation_report(tiny_cfg, tiny_data, tmp_path):
    cfg = from_dict({"train": {"epochs": 1}}, tiny_cfg)
    rep = ablation_compare(cfg, [0], lambda seed: tiny_data)
    assert rep["all_same_init"] and set(rep["runs"][0]) >= {"with_inst", "without_inst", "seed"}
    save_checkpoint(tmp_path / "rep", {}, cfg.to_dict(), {"report": rep})
    assert load_checkpoint(tmp_path / "rep").meta["report"] == json.loads(json.dumps(rep))


def test_export_embeddings(tiny_cfg, tiny_data, tmp_path):
    st = init_state(tiny_cfg, tiny_data[0], 0)
    header = "sample_id,box_index,label," + ",".join(f"e{i}" for i in range(16))
    assert export_embeddings(st.params, tiny_cfg, []).strip() == header
    text = export_embeddings(st.params, tiny_cfg, tiny_data[1], tmp_path / "a.csv")
    rows = text.strip().split("\n")
    assert rows[0] == header
    assert len(rows) - 1 == sum(len(s.boxes) for s in tiny_data[1])
    export_embeddings(st.params, tiny_cfg, tiny_data[1], tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def _layer_norm(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def test_attention_export_matches_numpy_oracle(tiny_cfg, tiny_data):
    from nucleimim.instance import embed_instance, roi_align
    cfg = tiny_cfg
    m = cfg.model
    st = init_state(cfg, tiny_data[0], 5)
    sample = tiny_data[1][0]
    out = export_attention(st.params, cfg, sample, layer=0, head=1, query="cls")
    n = len(sample.boxes)
    total = out["cls"] + out["grid"].sum() + out["instances"].sum()
    assert total == pytest.approx(1.0, abs=1e-12)
    assert out["grid"].shape == (4, 4) and out["instances"].shape == (n,)

    # rebuild layer-0 CLS attention from the raw parameters
    p = {k: v.data for k, v in st.params.items()}
    img = make_batch([sample], cfg).images[0]
    patches = img.reshape(4, 8, 4, 8, 3).transpose(0, 2, 1, 3, 4).reshape(16, -1)
    c = patches @ p["patch_proj"] + p["patch_bias"]
    boxes = sample.box_array()
    with ad.precision(np.float64):
        inst = embed_instance(roi_align(c.reshape(1, 4, 4, 16), boxes, np.zeros(n), 8), p["inst_conv"],
                              p["inst_bias"]).data
    geo = np.concatenate([
        np.stack([(np.arange(16) % 4 + 0.5) / 4, (np.arange(16) // 4 + 0.5) / 4, np.full(16, 0.25), np.full(16, 0.25)], 1),
        np.stack([(boxes[:, 0] + boxes[:, 2]) / 64, (boxes[:, 1] + boxes[:, 3]) / 64,
                  (boxes[:, 2] - boxes[:, 0]) / 32, (boxes[:, 3] - boxes[:, 1]) / 32], 1)])
    seq = np.concatenate([(p["cls_token"] + p["cls_pos"])[None], np.concatenate([c, inst]) + encode_geometry(geo, 16)])
    h = _layer_norm(seq, p["blocks.0.ln1_g"], p["blocks.0.ln1_b"])
    qkv = h @ p["blocks.0.qkv_w"] + p["blocks.0.qkv_b"]
    q, k = qkv[:, 8:16], qkv[:, 16 + 8:16 + 16]
    logits = q[0] @ k.T / np.sqrt(8)
    w = np.exp(logits - logits.max())
    w /= w.sum()
    np.testing.assert_allclose(out["grid"].reshape(-1), w[1:17], atol=1e-12)
    np.testing.assert_allclose(out["instances"], w[17:], atol=1e-12)
    np.testing.assert_allclose(out["cls"], w[0], atol=1e-12)


def test_attention_query_errors(tiny_cfg, tiny_data):
    st = init_state(tiny_cfg, tiny_data[0], 0)
    s = tiny_data[1][0]
    with pytest.raises(IndexError):
        export_attention(st.params, tiny_cfg, s, 0, 0, f"instance:{len(s.boxes)}")
    with pytest.raises(IndexError):
        export_attention(st.params, tiny_cfg, s, 3, 0)
    row = export_attention(st.params, tiny_cfg, s, 0, 0, "grid:5")
    assert row["query_position"] == 6
