import os

# finiteness checks on every tensor entering a graph; must be set before import
os.environ.setdefault("HD_LAB_CHECKED", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from hd_lab import autodiff as ad  # noqa: E402

ad.CHECKED = os.environ["HD_LAB_CHECKED"] == "1"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("HD_LAB_OUT", str(tmp_path / "runs"))
    return tmp_path
