import numpy as np
import pytest

from bartmed.basis import build_mediator_design, build_outcome_design, make_design_spec
from bartmed.dataset import synthesize_dataset
from bartmed.glm import fit_quasipoisson
from bartmed.mediator_linear import fit_linear_mediator


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests marked slow")


def pytest_configure(config):
    config._acceptance = {}


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="slow; enable with --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config._acceptance
    if not results:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for cid, title in CRITERIA.items():
        if cid in results:
            ok, detail = results[cid]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {title} -- {detail}")
        else:
            terminalreporter.write_line(f"[SKIP] criterion {cid}: {title} -- not run")


@pytest.fixture
def record(request):
    """Store one acceptance result; printed in the terminal summary."""

    def _record(cid, ok, detail):
        request.config._acceptance[cid] = (bool(ok), detail)
        print(f"criterion {cid}: {'PASS' if ok else 'FAIL'} -- {detail}")

    return _record


@pytest.fixture(scope="session")
def synth_ds():
    return synthesize_dataset(2208, 1)


@pytest.fixture(scope="session")
def small_ds():
    return synthesize_dataset(368, 5)


@pytest.fixture(scope="session")
def outcome_fit(synth_ds):
    spec = make_design_spec(synth_ds, "outcome")
    return fit_quasipoisson(build_outcome_design(synth_ds, spec), synth_ds.y)


@pytest.fixture(scope="session")
def linear_mediator(synth_ds):
    spec = make_design_spec(synth_ds, "mediator")
    return fit_linear_mediator(build_mediator_design(synth_ds, spec), synth_ds.m)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
