import os

import numpy as np
import pytest
import skimage.data

from mfdenoise.harness import DATA_ENV


@pytest.fixture(scope="session")
def camera():
    """Cameraman, 512 x 512, float64 gray levels."""
    return skimage.data.camera().astype(np.float64)


@pytest.fixture(scope="session")
def camera64(camera):
    return camera[200:264, 220:284].copy()


def textured(h, w, seed=0, smooth=1.5):
    """Smooth random texture in [0, 255], suitable for flow checks."""
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    t = ndimage.gaussian_filter(rng.standard_normal((h, w)), smooth, mode="wrap")
    t -= t.min()
    return 255.0 * t / t.max()


def benchmark_dir():
    """Benchmark data directory, or None when not configured."""
    d = os.environ.get(DATA_ENV)
    return d if d and os.path.isdir(d) else None


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}")
