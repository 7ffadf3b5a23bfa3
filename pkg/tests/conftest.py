#!/usr/bin/env python3
import os
import shutil
import tempfile
from typing import Generator

from base import BaseTestcase
from base import RunInfo

import pytest


@pytest.fixture
def run_info() -> Generator[RunInfo, None, None]:
    """Yield a copy of the small scenario and a fresh output directory."""
    with tempfile.TemporaryDirectory() as tmp_dir:
        config_path = os.path.join(tmp_dir, "scenario.json")
        shutil.copyfile(BaseTestcase.SMALL_SCENARIO_PATH, config_path)

        yield RunInfo(
            config_path=config_path,
            out_dir=os.path.join(tmp_dir, "out"),
        )
