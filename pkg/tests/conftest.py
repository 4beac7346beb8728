from __future__ import annotations

import numpy as np
import pytest

from mild.gauss import BlockSplit, MultivariateGaussian
from mild.hsmm import HsmmModel
from mild.hsmm.forward import ForwardFilter

from oracles import random_spd

ACCEPTANCE_LINES: list[str] = []
NORMALIZATION = {"steps": 0, "worst": 0.0}
NORMALIZATION_TOL = 1e-9


def random_hsmm(rng, K: int, d1: int, d2: int, d_max: int, left_right: bool = False) -> HsmmModel:
    d = d1 + d2
    comps = [MultivariateGaussian.from_cov(rng.normal(0, 1.5, d), random_spd(rng, d, 10.0)) for _ in range(K)]
    pi = rng.dirichlet(np.ones(K))
    trans = rng.dirichlet(np.ones(K), size=K)
    if left_right:
        trans = np.triu(trans)
        trans /= trans.sum(axis=1, keepdims=True)
    return HsmmModel(
        pi=pi,
        trans=trans,
        components=comps,
        dur_mean=rng.uniform(1.0, d_max + 1.0, K),
        dur_std=rng.uniform(0.3, 2.0, K),
        d_max=d_max,
        split=BlockSplit.halves(d1, d2),
    )


@pytest.fixture(autouse=True)
def _check_normalization(monkeypatch):
    """Every forward step taken anywhere in the suite must return weights summing to one."""
    original = ForwardFilter.step

    def step(self, obs=None):
        h = original(self, obs)
        err = abs(float(h.sum()) - 1.0)
        NORMALIZATION["steps"] += 1
        NORMALIZATION["worst"] = max(NORMALIZATION["worst"], err)
        assert err <= NORMALIZATION_TOL, f"forward weights sum to {h.sum()!r}"
        return h

    monkeypatch.setattr(ForwardFilter, "step", step)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance_line():
    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if NORMALIZATION["steps"]:
        ok = NORMALIZATION["worst"] <= NORMALIZATION_TOL
        ACCEPTANCE_LINES.append(
            f"criterion  3: {'PASS' if ok else 'FAIL'}  session-wide max |sum(h) - 1| = "
            f"{NORMALIZATION['worst']:.2e} over {NORMALIZATION['steps']} forward steps"
        )
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
