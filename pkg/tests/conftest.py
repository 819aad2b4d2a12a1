from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from mvhmr.bodymodel import BodyParams, TemplateConfig, make_template  # noqa: E402
from mvhmr.synth import SynthConfig, generate_sample, sample_rng  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FROZEN_PATH = Path(__file__).parent / "data" / "frozen.json"


@pytest.fixture(scope="session")
def template():
    return make_template(TemplateConfig())


@pytest.fixture(scope="session")
def frozen():
    return json.loads(FROZEN_PATH.read_text())


@pytest.fixture(scope="session")
def clean_samples(template):
    cfg = SynthConfig().clean()
    return [generate_sample(cfg, template, sample_rng(0, i), i) for i in range(3)]


def random_params(rng, scale=0.4, n_joints=17, n_shape=10):
    return BodyParams(
        rng.normal(scale=scale, size=(n_joints - 1, 3)),
        rng.normal(size=n_shape),
        rng.normal(scale=1.0, size=3),
    )


# --------------------------------------------------------------------------- acceptance report

_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    _CRITERIA[n] = (bool(ok), detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
