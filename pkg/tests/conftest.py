import pytest

from hubworld import attention


@pytest.fixture(autouse=True)
def _reset_backend():
    yield
    attention.set_backend("auto")


@pytest.fixture(params=["compiled", "python"])
def backend(request):
    if request.param == "compiled" and not attention.HAVE_COMPILED:
        pytest.skip("compiled kernels unavailable")
    attention.set_backend(request.param)
    return request.param
