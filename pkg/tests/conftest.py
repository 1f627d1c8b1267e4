import os
from pathlib import Path

import numpy as np
import pytest

from im3f.model import RatingsDataset

ROOT = Path(__file__).resolve().parents[1]
DATA_DIR = Path(os.environ.get("IM3F_DATA_DIR", ROOT / "data"))

_REPORT_KEY = pytest.StashKey[list]()


def data_file(*parts) -> Path | None:
    p = DATA_DIR.joinpath(*parts)
    return p if p.exists() else None


@pytest.fixture(scope="session")
def ml100k_path():
    p = data_file("ml-100k", "u.data")
    if p is None:
        pytest.skip(f"MovieLens 100k not found under {DATA_DIR} (run demos/fetch_data.py)")
    return p


@pytest.fixture(scope="session")
def ml100k(ml100k_path):
    from im3f.dataio import load_movielens

    return load_movielens(ml100k_path, "ml100k")


def grid_dataset(U=3, M=3, values=None):
    uu, jj = np.meshgrid(np.arange(U), np.arange(M), indexing="ij")
    vals = np.zeros(U * M) if values is None else values
    return RatingsDataset(U, M, uu.ravel(), jj.ravel(), vals)


def random_dataset(rng, U=8, M=6, density=0.6, scale=1.0):
    mask = rng.random((U, M)) < density
    mask[np.arange(U), rng.integers(0, M, U)] = True
    mask[rng.integers(0, U, M), np.arange(M)] = True
    u, j = np.nonzero(mask)
    return RatingsDataset(U, M, u, j, scale * rng.standard_normal(u.size))


@pytest.fixture
def report(request):
    """Record one acceptance line; all lines are printed at the end of the session."""
    lines = request.config.stash.setdefault(_REPORT_KEY, [])

    def add(name, passed, detail):
        status = passed if isinstance(passed, str) else "PASS" if passed else "FAIL"
        lines.append(f"{status:5s} {name}: {detail}")

    return add


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
