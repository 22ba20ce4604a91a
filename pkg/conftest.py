import pytest

from battery_simulator import SimConfig, simulate_fleet


def pytest_configure(config):
    config.addinivalue_line("markers", "performance: timing-sensitive checks (deselect with -m 'not performance')")


@pytest.fixture(scope="session")
def small_config():
    return SimConfig(num_cells=3, cycles_per_cell=24, seed=11)


@pytest.fixture(scope="session")
def small_fleet(small_config):
    return simulate_fleet(small_config)


@pytest.fixture(scope="session")
def default_fleet():
    return simulate_fleet(SimConfig())
