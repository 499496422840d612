import numpy as np
import pytest
import torch

from perfmae.decoder import DecoderConfig, build_mae
from perfmae.vit import ViTConfig

TINY_ENC = dict(embed_dim=24, n_blocks=2, n_heads=2, mlp_dim=48, patch_size=12, volume_shape=(24, 24, 24))
TINY_DEC = dict(dec_dim=12, n_blocks=1, n_heads=2, mlp_dim=24)


@pytest.fixture
def tiny_cfgs():
    return ViTConfig(**TINY_ENC), DecoderConfig(**TINY_DEC)


@pytest.fixture
def tiny_mae(tiny_cfgs):
    return build_mae(*tiny_cfgs, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _restore_determinism():
    yield
    torch.use_deterministic_algorithms(False)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
