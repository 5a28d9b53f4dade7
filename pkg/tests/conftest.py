import numpy as np
import pytest

from mtmd.config import ModelConfig, TrainConfig
from mtmd.dataset import generate_encoded
from mtmd.schema import make_default_schema


def tiny_model_config(**changes) -> ModelConfig:
    """Narrow widths so finite differences over whole models stay cheap."""
    base = dict(
        deep_dims=(6, 5),
        shallow_dims=(4, 3),
        gate_dims=(4,),
        dcn_layers=2,
        dcn_rank=2,
        task_dims={"CTR": 4, "GCTR": 3, "OCTR": 3},
    )
    base.update(changes)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def schema():
    return make_default_schema()


@pytest.fixture(scope="session")
def small_schema():
    return make_default_schema(emb_dim=2)


@pytest.fixture(scope="session")
def small_data(schema):
    return generate_encoded(3, 400, teacher_seed=3)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(seed=5, batch_size=32, steps=4, model=tiny_model_config())


def rng_array(seed, *shape):
    return np.random.default_rng(seed).normal(size=shape)


ACCEPTANCE_LINES = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    """Remember one pass/fail line for the terminal summary."""
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
