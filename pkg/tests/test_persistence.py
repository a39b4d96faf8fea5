import json

import numpy as np
import pytest

from nucleimim.config import from_dict
from nucleimim.persistence import CheckpointError, load_checkpoint, save_checkpoint
from nucleimim.training import load_state, params_digest, pretrain, run_epoch, save_state


def _arrays():
    rng = np.random.default_rng(0)
    return {"a": rng.normal(size=(3, 4)), "b/c": rng.normal(size=5).astype(np.float32),
            "i": np.arange(6, dtype=np.int64).reshape(2, 3), "empty": np.zeros((0, 4))}


def test_round_trip_bit_exact(tmp_path):
    arrays = _arrays()
    save_checkpoint(tmp_path / "ck", arrays, {"x": 1}, {"note": "hi"})
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.config == {"x": 1} and ck.meta == {"note": "hi"}
    for k, v in arrays.items():
        assert ck.arrays[k].dtype == v.dtype and ck.arrays[k].shape == v.shape
        assert ck.arrays[k].tobytes() == v.tobytes()
    assert set(ck.group("b")) == {"c"}


def test_corrupt_manifest(tmp_path):
    save_checkpoint(tmp_path, _arrays(), {})
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(CheckpointError, match="corrupt manifest"):
        load_checkpoint(tmp_path)


def test_schema_mismatch(tmp_path):
    save_checkpoint(tmp_path, _arrays(), {})
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["schema_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(CheckpointError, match="schema version 99"):
        load_checkpoint(tmp_path)


def test_truncated_blob(tmp_path):
    save_checkpoint(tmp_path, _arrays(), {})
    blob = (tmp_path / "arrays.bin").read_bytes()
    (tmp_path / "arrays.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="no manifest"):
        load_checkpoint(tmp_path / "nope")


def test_resume_reproduces_next_epoch(tiny_cfg, tiny_data, tmp_path):
    cfg = from_dict({"train": {"epochs": 3}}, tiny_cfg)
    full = pretrain(cfg, tiny_data[0], seed=4)
    part = pretrain(cfg, tiny_data[0], seed=4, epochs=1)
    save_state(part, tmp_path / "ck", seed=4)
    resumed = load_state(tmp_path / "ck")
    assert params_digest(resumed.params) == params_digest(part.params)
    pretrain(cfg, tiny_data[0], seed=4, state=resumed)
    assert resumed.trace == full.trace
    assert params_digest(resumed.params) == params_digest(full.params)
