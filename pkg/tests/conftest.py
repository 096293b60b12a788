import multiprocessing

import pytest

from layered_or import api


@pytest.fixture(autouse=True)
def reap_engines():
    yield
    for handle in list(api._REGISTRY.values()):
        api._teardown(handle, force=False)
    for child in multiprocessing.active_children():
        child.terminate()
        child.join(timeout=2.0)
