import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def gaussian_blob(shape, mu, sigma, amplitude=1.0):
    """Reference isotropic Gaussian evaluated pixel by pixel."""
    grids = np.meshgrid(*[np.arange(s, dtype=float) for s in shape], indexing="ij")
    sq = sum((g - m) ** 2 for g, m in zip(grids, mu))
    return amplitude * np.exp(-sq / (2.0 * sigma**2))
