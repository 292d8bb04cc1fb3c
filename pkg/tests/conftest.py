"""Shared pytest settings."""


def pytest_configure(config) -> None:
    config.addinivalue_line("markers", "slow: trains full-size models; deselect with -m 'not slow'")
