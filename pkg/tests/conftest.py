import time

import numpy as np
import pytest

from dpf_nutrition.model import ModelConfig
from dpf_nutrition.synthetic import synthetic_dataset


def tiny_config(**kw) -> ModelConfig:
    base = dict(backbone="tiny", image_size=(32, 32), head_hidden=8, depth_norm="fixed", depth_max=10.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def small_scenes():
    """Eight 32x32 synthetic dishes."""
    return synthetic_dataset(8, seed=3, image_size=(32, 32), plate_radius=14, radius_range=(3, 6))


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))


def desk_config(**kw) -> ModelConfig:
    base = dict(backbone="small", image_size=(64, 80), head_hidden=256, depth_norm="fixed", depth_max=10.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def overfit_desk():
    """Desk-sized model driven to memorise sixteen synthetic dishes in 500 optimizer steps."""
    from dpf_nutrition.model import build_model
    from dpf_nutrition.training import TrainConfig, fit

    samples = synthetic_dataset(16, seed=5)
    model = build_model(desk_config(), seed=0)
    cfg = TrainConfig(lr0=1e-3, decay=0.99, epochs=250, batch=8, max_steps=500, flip_prob=0.5, seed=0)
    start = time.perf_counter()
    result = fit(model, samples, cfg)
    return model.eval(), samples, result, time.perf_counter() - start


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> bool:
    """Remember one PASS/FAIL line for the terminal summary and echo it now."""
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
