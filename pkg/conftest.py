"""
Root pytest configuration: slow training runs only execute with --integration
"""
import pytest


def pytest_addoption(parser):
    parser.addoption(
        "--integration", action="store_true", default=False,
        help="run training-based integration tests",
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "integration: trains models; needs --integration")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--integration"):
        return
    skip = pytest.mark.skip(reason="needs --integration")
    for item in items:
        if "integration" in item.keywords:
            item.add_marker(skip)
