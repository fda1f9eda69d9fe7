import pytest

from stagewise import _kernels as K


@pytest.fixture(scope="session", autouse=True)
def _compiled_kernels():
    K.warmup()
