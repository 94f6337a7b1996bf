import sys

import numpy as np
import pytest

from semclip.imaging import RasterImage


def solid_image(width: int, height: int, rgb=(128, 128, 128)) -> RasterImage:
    arr = np.empty((height, width, 3), dtype=np.uint8)
    arr[:] = rgb
    return RasterImage.from_array(arr)


def random_image(width: int, height: int, seed: int = 0) -> RasterImage:
    rng = np.random.default_rng(seed)
    return RasterImage.from_array(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


@pytest.fixture
def make_solid():
    return solid_image


@pytest.fixture
def make_random():
    return random_image


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        status = "PASS" if report.passed else "FAIL"
        sys.stderr.write(f"\n[{status}] {name}\n")
        sys.stderr.flush()
