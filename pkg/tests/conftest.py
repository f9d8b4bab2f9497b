import numpy as np
import pytest

from tablewipe._kernels import get_backend


def available_backends() -> list[str]:
    names = ["numpy"]
    try:
        get_backend("numba")
        names.append("numba")
    except Exception:
        pass
    return names


@pytest.fixture(params=available_backends())
def backend(request) -> str:
    return request.param


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
