import numpy as np
import pytest

from detco.config import desk_config
from detco.data import ToySpec, generate_toy

CRITERIA: list[str] = []


def record_criterion(label: str, ok: bool, detail: str) -> None:
    CRITERIA.append(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)


def tiny_config(**overrides):
    """Fast settings for unit tests: 4-image batches, 16-row queues."""
    base = {
        "trainer.batch_size": 4,
        "trainer.total_steps": 20,
        "trainer.checkpoint_every": 10,
        "memory.queue_size": 16,
        "model.stage_channels": (8, 16, 32, 64),
        "model.embed_dim": 16,
        "augment.randaug_ops": 1,
    }
    base.update(overrides)
    return desk_config(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def small_toy():
    return generate_toy(ToySpec(num_classes=4, samples_per_class=6, image_side=64, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
