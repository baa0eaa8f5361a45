#!/usr/bin/env python3
"""
Shared pytest fixtures and configuration
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path to import our modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from reference_flows import AffineFlow
from target_gmm import GaussianPrior, GmmSpec


@pytest.fixture
def rng():
    """Seeded generator; every test gets a fresh copy."""
    return np.random.default_rng(20240611)


@pytest.fixture
def two_mode_gmm():
    """Two-component, anisotropic mixture in D=2."""
    return GmmSpec(
        weights=[0.3, 0.7],
        means=[[-1.0, 0.5], [1.5, -0.5]],
        variances=[[0.5, 0.3], [0.4, 0.6]],
    )


@pytest.fixture
def separated_gmm():
    """Four far-apart components in D=3 with unequal weights."""
    return GmmSpec(
        weights=[0.1, 0.2, 0.3, 0.4],
        means=[[8.0, 0.0, 0.0], [-8.0, 0.0, 0.0], [0.0, 8.0, 0.0], [0.0, -8.0, 0.0]],
        variances=[[0.5, 0.5, 0.5]] * 4,
    )


@pytest.fixture
def affine_flow():
    """D=4 affine flow with a negative and a contracting scale."""
    return AffineFlow([2.0, 4.0, 0.5, -1.5], [0.0, 1.0, -1.0, 0.5])


@pytest.fixture
def standard_prior():
    return GaussianPrior(4, 1.0)


@pytest.fixture
def write_json(tmp_path):
    """Helper fixture writing a JSON document under tmp_path and returning its path."""
    import json

    def _write(name, data):
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding='utf-8')
        return str(path)
    return _write


def pytest_collection_modifyitems(config, items):
    """Automatically mark tests based on their location and name."""
    for item in items:
        if "integration" in item.nodeid or "test_cli" in item.nodeid:
            item.add_marker(pytest.mark.integration)

        if "test_acceptance" in item.nodeid:
            item.add_marker(pytest.mark.slow)

        if not any(marker.name in ['integration', 'slow'] for marker in item.iter_markers()):
            item.add_marker(pytest.mark.unit)


def pytest_configure(config):
    """Configure pytest with custom settings."""
    config.addinivalue_line(
        "markers", "unit: marks tests as unit tests"
    )
    config.addinivalue_line(
        "markers", "integration: marks tests as integration tests"
    )
    config.addinivalue_line(
        "markers", "statistical: marks Monte Carlo tests checked against an exact oracle"
    )
    config.addinivalue_line(
        "markers", "slow: marks acceptance-scale runs (minutes)"
    )
