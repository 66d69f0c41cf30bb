import numpy as np
import pytest

from abreu.geometry import build_grid, nested_disks


@pytest.fixture(scope="session")
def disk_domains():
    return nested_disks(1.0, 0.5)


@pytest.fixture(scope="session")
def grid33(disk_domains):
    return build_grid(disk_domains, 33)


@pytest.fixture(scope="session")
def grid65(disk_domains):
    return build_grid(disk_domains, 65)


def quadratic(a=1.0, b=0.0, c=1.0, lx=0.0, ly=0.0, const=0.0):
    """u = (a x^2 + 2 b x y + c y^2)/2 + lx x + ly y + const."""
    def f(x, y):
        return 0.5 * (a * x * x + 2 * b * x * y + c * y * y) + lx * x + ly * y + const
    return f
