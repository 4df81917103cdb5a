"""Shared pytest configuration."""


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: statistical acceptance suites (deselect with -m 'not slow')"
    )
