import os
import sys
from pathlib import Path

import pytest

from mvdis import pipeline


@pytest.fixture(scope="session")
def run_root(tmp_path_factory):
    """Shared output directory so identical (config, seed) runs train once per session.

    Set MVDIS_RUN_CACHE to keep runs across sessions; entries are keyed by the
    config hash, so clear the directory after changing training code.
    """
    keep = os.environ.get("MVDIS_RUN_CACHE")
    if keep:
        Path(keep).mkdir(parents=True, exist_ok=True)
        return Path(keep)
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="session")
def default_config():
    return pipeline.RunConfig()


@pytest.fixture(scope="session")
def full_run(run_root, default_config):
    """Default two-stage run, seed 0, and its run directory."""
    rec = pipeline.run_seed(default_config, 0, run_root)
    return rec, run_root / pipeline.config_hash(default_config) / "0"


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS.values():
        terminalreporter.write_line(line)
