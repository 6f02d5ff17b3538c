import numpy as np
import pytest

from acoustemo.synth import SynthSpec, synth_generate
from acoustemo.training import TrainConfig


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Twelve dialogues (six twin pairs), d=8; ten train, two test."""
    out = tmp_path_factory.mktemp("corpus")
    return synth_generate(SynthSpec(seed=3, n_dialogues=12, d=8), out)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(seed=0, base_lr=1e-2, epochs=2, batch_size=4, n_queries=2, d_qformer=8,
                       d_model=16, lora_rank=4, pretrain_steps=20, max_new_tokens=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
