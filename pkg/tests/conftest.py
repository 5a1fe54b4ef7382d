from contextlib import contextmanager

import numpy as np
import pytest

from softgm.actuation import ActuationParams
from softgm.env import EnvConfig
from softgm.rod import RodParams
from softgm.scenario import LayoutConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_env_config():
    # reduced arm used across env/trainer tests
    return EnvConfig(rod=RodParams(n_elements=20, dt_physics=5e-4), actuation=ActuationParams(n_agents=4),
                     control_substeps=100)


@pytest.fixture
def short_layout():
    return LayoutConfig(max_episode_steps=30)


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """Context manager that records one acceptance line: ``with criterion("3", "title") as note:``."""
    results = request.config.stash[ACCEPTANCE]

    @contextmanager
    def record(key, title):
        note = {}
        try:
            yield note
        except BaseException as exc:
            reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            results[key] = ("FAIL", title, "; ".join(filter(None, [note.get("detail"), reason])))
            raise
        results[key] = ("PASS", title, note.get("detail", ""))

    return record


def _natural(key):
    head, _, tail = key.partition("-")
    return int(head), tail


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=_natural):
        status, title, detail = results[key]
        terminalreporter.write_line(f"criterion {key:<8} {status}  {title}" + (f"  [{detail}]" if detail else ""))
