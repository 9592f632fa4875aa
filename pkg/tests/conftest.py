"""Shared fixtures.  The toy experiment (dataset, two trained models, a
calibrated threshold sidecar) is built once per session; building it takes
about a minute on one CPU core."""

from __future__ import annotations

import copy
import os

import numpy as np
import pytest
import torch

from advcamo import cli
from advcamo.experiment import build_context, load_config, make_toy_experiment

torch.set_num_threads(min(4, os.cpu_count() or 1))


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_toy_experiment(root, n_models=2, seed=0)
    assert cli.main(["calibrate", "--config", str(root / "experiment.yaml"), "--out", str(root / "runs")]) == 0
    return root


@pytest.fixture(scope="session")
def toy_config(toy_root):
    return toy_root / "experiment.yaml"


@pytest.fixture(scope="session")
def toy_ctx(toy_config):
    return build_context(load_config(toy_config))


@pytest.fixture(scope="session")
def toy_model(toy_ctx):
    return toy_ctx.model("toy")


@pytest.fixture(scope="session")
def toy_model64(toy_model):
    m = copy.deepcopy(toy_model)
    m.net.double()
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS, line

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(line(RESULTS[n]))
