import pytest

from nucleimim.config import from_dict
from nucleimim.data import SyntheticConfig, generate_synthetic
from nucleimim.rng import Rng

TINY = {
    "model": {"image_size": 32, "patch_size": 8, "dim": 16, "layers": 1, "heads": 2, "n_max": 8, "vocab_size": 16},
    "tokenizer": {"iterations": 5, "train_images": 16},
    "train": {"epochs": 2, "batch_size": 8},
    "finetune": {"epochs": 2, "batch_size": 8},
    "probe": {"max_iter": 100},
    "precision": "float64",
}


@pytest.fixture
def tiny_cfg():
    return from_dict(TINY)


@pytest.fixture(scope="session")
def tiny_data():
    cfg = SyntheticConfig(n_images=24, height=32, width=32, nuclei_per_image=(1, 3))
    samples, _ = generate_synthetic(cfg, Rng(7))
    return samples[:16], samples[16:20], samples[20:]


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number: int, title: str, ok: bool, detail: str):
        _ACCEPTANCE[number] = f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}"
        assert ok, _ACCEPTANCE[number]
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
