"""
Shared pytest configuration.
Puts the repository root on the import path and gates the desk-scale studies
behind SDESENS_RUN_SLOW=1.
"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import settings  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale study taking minutes (set SDESENS_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv(settings.ENV_RUN_SLOW) == "1":
        return
    skip_slow = pytest.mark.skip(reason=f"set {settings.ENV_RUN_SLOW}=1 to run desk-scale studies")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
