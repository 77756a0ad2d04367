"""
Shared pytest fixtures for rmflow-lab

Full-budget acceptance runs are marked slow and only execute with RMFLOW_RUN_SLOW=1.
"""

import os
import sys

import pytest

# Add src directory to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.config import RUN_SLOW_TESTS, configure_torch
from src.models.nets import NetConfig

configure_torch()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-budget acceptance experiment (set RMFLOW_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW_TESTS:
        return
    skip_slow = pytest.mark.skip(reason="full-budget run; set RMFLOW_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_net_config():
    """Small backbone for fast unit tests"""
    return NetConfig(width=16, depth=2, embed_dim=8, embed_max_log2=4.0, guidance_hidden=8)


@pytest.fixture
def ci_net_config():
    """Backbone for CI-sized training runs"""
    return NetConfig(width=64, depth=3, embed_dim=16, embed_max_log2=6.0, guidance_hidden=32)
