import pytest
from threadpoolctl import threadpool_limits


@pytest.fixture(scope="session", autouse=True)
def single_threaded_blas():
    # OpenBLAS thread fan-out is counterproductive at these matrix sizes
    with threadpool_limits(limits=1):
        yield
