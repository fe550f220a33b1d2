import logging

import numpy as np
import pytest

from epimerge.checkpoint import ParameterSet

logging.getLogger("epimerge").setLevel(logging.ERROR)


def random_set(rng, shapes, dtype="f64", scale=1.0):
    """ParameterSet with standard-normal entries; ``shapes`` maps name -> shape."""
    entries = {n: scale * rng.standard_normal(s) for n, s in shapes.items()}
    if dtype == "f32":
        entries = {n: a.astype(np.float32) for n, a in entries.items()}
    return ParameterSet(entries)


def perturbed(rng, base, scale=0.1):
    return ParameterSet({n: base[n] + scale * rng.standard_normal(base[n].shape) for n in base}, dtypes=base.dtypes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_model(rng):
    """Base plus three fine-tuned sets, one auxiliary layer, all matrix layers wide enough for k=2, T=3."""
    shapes = {"w1": (8, 7), "w2": (6, 9), "b": (5,)}
    base = random_set(rng, shapes)
    models = [perturbed(rng, base) for _ in range(3)]
    fishers = [ParameterSet({n: rng.uniform(0.1, 2.0, s) for n, s in shapes.items()}) for _ in range(3)]
    return base, models, fishers


# acceptance criteria append one summary line each; shown after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_line():
    def emit(line: str) -> None:
        print(line)
        ACCEPTANCE_LINES.append(line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
