"""Shared fixtures: cached smoke-config pipeline runs and acceptance verdict lines.

Runs live under pytest's cache directory (``.pytest_cache/d/userip-runs``), one
directory per resolved config, so repeated sessions reuse finished stages.
Delete that directory (or pass ``--cache-clear``) to recompute from scratch.
"""

import copy

import pytest

from userip import pipeline

_verdicts = pytest.StashKey[list]()


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict):
            out[key] = {**out.get(key, {}), **value}
        else:
            out[key] = value
    return out


@pytest.fixture(scope="session")
def run_root(request):
    return request.config.cache.mkdir("userip-runs")


@pytest.fixture(scope="session")
def smoke(run_root):
    """``smoke(seed, stage, **sections)`` -> a Run with ``stage`` and its upstream done."""

    def get(seed: int = 0, stage: str = "eval", **sections) -> pipeline.Run:
        obj = _merge({"seed": seed, "lm": {"cache_dir": str(run_root / "lm-cache")}}, sections)
        cfg = pipeline.RunConfig.from_dict(obj)
        run = pipeline.Run(cfg, run_root / cfg.run_id)
        pipeline.ensure(run, stage)
        return run

    return get


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_verdicts, [])

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_verdicts, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
