import pytest

from alen import tensor as T


@pytest.fixture(autouse=True)
def _grad_mode_guard(request):
    """No test may leak inference mode into the ones that follow it."""
    assert T.grad_enabled(), f"graph recording already off before {request.node.nodeid}"
    yield
    assert T.grad_enabled(), f"graph recording left off by {request.node.nodeid}"
