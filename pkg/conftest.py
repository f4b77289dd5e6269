import os

import hypothesis
import numpy as np
import pytest

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))

RUN_SLOW = os.getenv("CIPA_RUN_SLOW", "0") == "1"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks (set CIPA_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="set CIPA_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(params=range(5))
def rng(request):
    return np.random.default_rng(request.param)


@pytest.fixture
def float64():
    """Run the test body with float64 parameters and primitives"""
    import tensor_core as tc

    with tc.shadow64():
        yield
