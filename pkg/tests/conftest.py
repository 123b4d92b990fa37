"""Shared fixtures.

The pretrained denoiser is expensive (a couple of CPU-minutes), so it is
built once per session and shared by every test that needs a trained model.
"""

import time

import numpy as np
import pytest
import torch
from hypothesis import settings

from zodi.config import RunConfig
from zodi.pipeline import build_splits, pretrain_denoiser

settings.register_profile("zodi", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("zodi")

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def run_config() -> RunConfig:
    return RunConfig()


@pytest.fixture(scope="session")
def splits(run_config):
    return build_splits(run_config)


@pytest.fixture(scope="session")
def pretrained(run_config, splits):
    """``(denoiser, losses, seconds)`` for the default configuration."""
    t0 = time.perf_counter()
    den, losses = pretrain_denoiser(run_config, splits.pretrain_corpus)
    return den, losses, time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------------- acceptance summary

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """``log(n, ok, detail)`` records the verdict line of criterion ``n``."""

    def log(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
