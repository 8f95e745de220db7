import numpy as np
import pytest

from cryoimb import _kernels
from cryoimb.dataset import LabeledDataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


BACKENDS = ["numpy"] + (["numba"] if _kernels.HAS_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    previous = _kernels.set_backend(request.param)
    yield request.param
    _kernels.set_backend(previous)


def blob_dataset(rng, counts, dim=8, sigma=0.3):
    """Classes as bright cubes in different octants; trivially separable."""
    vols, labels = [], []
    corners = [(0, 0, 0), (1, 1, 1), (0, 1, 0), (1, 0, 1)]
    h = dim // 2
    for c, n in enumerate(counts):
        a, b, e = corners[c % 4]
        for _ in range(n):
            v = sigma * rng.standard_normal((dim, dim, dim))
            v[a * h:(a + 1) * h, b * h:(b + 1) * h, e * h:(e + 1) * h] += 1.0
            vols.append(v)
            labels.append(c)
    vols = np.asarray(vols, dtype=np.float32)
    perm = rng.permutation(len(labels))
    return LabeledDataset(vols[perm], np.asarray(labels)[perm], len(counts))


@pytest.fixture
def blobs(rng):
    return blob_dataset(rng, [40, 20])


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
