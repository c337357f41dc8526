import pytest

from shelfsize.pipeline import PipelineConfig, split_scenes
from shelfsize.gbdt import GbdtParams
from shelfsize.setnet import SetNetParams
from shelfsize.synthgen import NoiseConfig, SceneConfig, generate_catalog, generate_dataset

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_catalog():
    return generate_catalog(3, (2, 3), 0.3, rng_seed=11)


@pytest.fixture(scope="session")
def small_scenes(small_catalog):
    return generate_dataset(small_catalog, SceneConfig(groups_per_scene=(2, 3), rng_seed=11),
                            NoiseConfig(sigma=0.02), 80)


@pytest.fixture(scope="session")
def fast_config():
    return PipelineConfig(gbdt=GbdtParams(n_rounds=20), setnet=SetNetParams(epochs=20, hidden=8))


@pytest.fixture(scope="session")
def small_split(small_scenes):
    return split_scenes(small_scenes, 0.25, 0)
