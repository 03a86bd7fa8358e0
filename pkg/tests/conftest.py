import os

import pytest

from mope.solver import PolicyCache


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    # reuse a warm cache across runs when MOPE_CACHE_DIR is set
    env = os.environ.get("MOPE_CACHE_DIR")
    return env if env else str(tmp_path_factory.mktemp("policy-cache"))


@pytest.fixture(scope="session")
def cache(cache_dir):
    return PolicyCache(cache_dir)
