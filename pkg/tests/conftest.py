import dataclasses

import pytest

from dpspg.datagen import DatasetSpec
from dpspg.pipeline import RunConfig, Stage1Section, build_world

# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def small_config(**kw) -> RunConfig:
    """Shrunk world for unit tests: 3 domains, 12 samples per cell, short training."""
    base = RunConfig(
        data=DatasetSpec(K=3, S_total=3, n_per_class_per_domain=12),
        stage1=Stage1Section(epochs=6),
        seeds=(0, 1),
    )
    base = dataclasses.replace(base, stage2=dataclasses.replace(base.stage2, epochs=10, warmup_epochs=2))
    return dataclasses.replace(base, **kw)


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_world(small_cfg):
    return build_world(small_cfg)


@pytest.fixture(scope="session")
def small_labels(small_world, small_cfg):
    from dpspg.pipeline import train_labels

    return train_labels(small_world, small_cfg, seed=0)


@pytest.fixture(scope="session")
def small_pair(small_world, small_cfg, small_labels):
    """Dual generators with domain 2 held out."""
    from dpspg.pipeline import train_lodo

    return train_lodo(small_world, small_cfg, small_labels, target=2, seed=0, variant="dual")


@pytest.fixture(scope="session")
def default_cfg():
    return RunConfig()


@pytest.fixture(scope="session")
def default_world(default_cfg):
    return build_world(default_cfg)


@pytest.fixture(scope="session")
def default_labels(default_world, default_cfg):
    from dpspg.pipeline import train_labels

    return train_labels(default_world, default_cfg, seed=0)


@pytest.fixture(scope="session")
def default_pair(default_world, default_cfg, default_labels):
    """Dual generators on the default spec, domain 0 held out."""
    from dpspg.pipeline import train_lodo

    return train_lodo(default_world, default_cfg, default_labels, target=0, seed=0, variant="dual", track=False)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
