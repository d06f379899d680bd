import numpy as np
import pytest

from promptmil import synth
from promptmil.trainer import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_synth_config(**over) -> synth.SynthConfig:
    base = dict(n_bags=24, instances_min=16, instances_max=24, d0=24, dt=16, seed=3)
    base.update(over)
    return synth.SynthConfig(**base)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 24-bag synthetic dataset on disk: (manifest, prompts, SynthDataset)."""
    from promptmil.store import load_manifest

    ds = synth.generate(small_synth_config())
    out = tmp_path_factory.mktemp("small_synth")
    manifest = load_manifest(synth.write_dataset(ds, out))
    return manifest, ds.prompts, ds


@pytest.fixture
def quick_config():
    return TrainConfig(max_epochs=2, heads=2, seed=5, lr=1e-3)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[n])
