"""Shared fixtures: the default verification stack is trained once per test session."""

import time
from types import SimpleNamespace

import pytest

from verinfer.config import ExperimentConfig
from verinfer.experiments import direct_attack_suite, run_sessions
from verinfer.pipeline import evaluate, save_stack, train_all, train_proxy

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance criterion result; printed in the terminal summary."""

    def record(number: int, name: str, passed: bool, detail: str = "") -> bool:
        _CRITERIA[number] = (name, bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {name} ({detail})")


@pytest.fixture(scope="session")
def default_stack(tmp_path_factory):
    t0 = time.perf_counter()
    stack = train_all(ExperimentConfig())
    train_seconds = time.perf_counter() - t0
    out = tmp_path_factory.mktemp("stack")
    save_stack(stack, out)
    return SimpleNamespace(stack=stack, dir=out, train_seconds=train_seconds)


@pytest.fixture(scope="session")
def evaluations(default_stack):
    t0 = time.perf_counter()
    stack = default_stack.stack
    out = {spec.name: evaluate(stack, spec) for spec in stack.config.specified}
    return SimpleNamespace(results=out, seconds=time.perf_counter() - t0)


@pytest.fixture(scope="session")
def simple_stack(default_stack):
    stack = default_stack.stack
    spec = stack.config.specified[0]
    if spec.name not in stack.simple_bundles:
        train_proxy(stack, spec, "simple")
    return stack


@pytest.fixture(scope="session")
def direct_result(simple_stack):
    spec = simple_stack.config.specified[0]
    t0 = time.perf_counter()
    r = direct_attack_suite(simple_stack, spec)
    return SimpleNamespace(result=r, seconds=time.perf_counter() - t0)


@pytest.fixture(scope="session")
def sessions(default_stack):
    """200 sessions of 30 queries per (specified model, strategy): honest and every substitute."""
    stack = default_stack.stack
    t0 = time.perf_counter()
    out = {}
    for spec in stack.config.specified:
        out[(spec.name, "honest")] = run_sessions(stack, spec, "honest", 200, 30)
        for alt in stack.config.alternatives:
            out[(spec.name, f"substitute:{alt.name}")] = run_sessions(stack, spec, f"substitute:{alt.name}", 200, 30)
    return out, time.perf_counter() - t0
