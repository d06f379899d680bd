import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_synth_config
from helpers import bayes_oracle_auc
from promptmil import synth
from promptmil.errors import InvalidConfig
from promptmil.selection import select_bag
from promptmil.store import load_bag, load_manifest, load_prompts


def test_same_seed_writes_identical_files(tmp_path):
    cfg = small_synth_config()
    synth.write_dataset(synth.generate(cfg), tmp_path / "a")
    synth.write_dataset(synth.generate(cfg), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    bags = sorted(p.name for p in (tmp_path / "a" / "bags").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / "bags", tmp_path / "b" / "bags", bags,
                                               shallow=False)
    assert not mismatch and not errors and len(match) == len(bags)


def test_different_seed_differs():
    a = synth.generate(small_synth_config(seed=1))
    b = synth.generate(small_synth_config(seed=2))
    assert not np.array_equal(a.bags[0].instances[:5], b.bags[0].instances[:5])


def _text_similarity(bag, comps):
    t = bag.text.astype(np.float64)
    return (t / np.linalg.norm(t, axis=1, keepdims=True)) @ (comps / np.linalg.norm(comps, axis=1, keepdims=True)).T


def test_noiseless_planted_copies_match_prompts():
    ds = synth.generate(small_synth_config(noise_sigma=0.0, batch_shift=0.0))
    comps = ds.prompts.by_role("component").matrix().astype(np.float64)
    for bag, truth in zip(ds.bags, ds.truth["bags"]):
        sim = _text_similarity(bag, comps)
        comp = np.asarray(truth["component"])
        planted = np.flatnonzero(np.asarray(truth["kind"]) == synth.KIND_CODES["planted"])
        assert np.mean(sim[planted, comp[planted]]) == pytest.approx(1.0, abs=1e-6)


def test_full_signal_separates_planted_instances():
    ds = synth.generate(small_synth_config(noise_sigma=0.0, batch_shift=0.0, signal_fraction=1.0))
    comps = ds.prompts.by_role("component").matrix().astype(np.float64)
    for bag, truth in zip(ds.bags, ds.truth["bags"]):
        sim = _text_similarity(bag, comps)
        comp = np.asarray(truth["component"])
        own = sim[np.arange(bag.n), comp]
        np.testing.assert_allclose(own, 1.0, atol=1e-6)
        others = np.where(np.arange(4)[None] == comp[:, None], -np.inf, sim)
        assert others.max() < 1 - 1e-3


def test_shift_is_shared_within_bag():
    ds = synth.generate(small_synth_config(noise_sigma=0.0))
    comps = ds.prompts.by_role("component").matrix().astype(np.float64)
    for bag, truth in zip(ds.bags, ds.truth["bags"]):
        planted = np.flatnonzero(np.asarray(truth["kind"]) == synth.KIND_CODES["planted"])
        comp = np.asarray(truth["component"])[planted]
        # noiseless planted rows are t_c + shift, so subtracting the prompt leaves the shift
        offsets = bag.text[planted].astype(np.float64) - comps[comp]
        np.testing.assert_allclose(offsets, offsets[0][None].repeat(len(planted), 0), atol=1e-6)
        assert np.linalg.norm(offsets[0]) == pytest.approx(np.linalg.norm(truth["shift"]), abs=1e-6)


@pytest.mark.parametrize("seed", [0, 1])
def test_label_balance(seed):
    ds = synth.generate(synth.SynthConfig(n_bags=101, instances_min=8, instances_max=12, seed=seed))
    assert abs(np.mean([b.label for b in ds.bags]) - 0.5) <= 0.02


def test_written_files_pass_store_validation(tmp_path):
    ds = synth.generate(small_synth_config())
    manifest = load_manifest(synth.write_dataset(ds, tmp_path))
    prompts = load_prompts(tmp_path / "prompts.json")
    assert prompts.names == ds.prompts.names
    for entry in manifest.entries():
        bag = manifest.load(entry)
        assert bag.n == entry.n and bag.text is not None and bag.coords is not None
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert truth["config"]["seed"] == 3 and len(truth["bags"]) == 24
    assert load_bag(tmp_path / manifest.entries()[0].path).d0 == manifest.d0


def test_selection_drops_only_decoys():
    ds = synth.generate(small_synth_config(noise_sigma=0.2))
    tissue = ds.prompts.by_role("tissue")
    for bag, truth in zip(ds.bags, ds.truth["bags"]):
        _, result = select_bag(bag, tissue, "cancer-associated stroma")
        kinds = np.asarray(truth["kind"])
        dropped = np.setdiff1d(np.arange(bag.n), result.kept_indices)
        assert np.all(kinds[dropped] == synth.KIND_CODES["tissue"])
        assert np.all(kinds[result.kept_indices] != synth.KIND_CODES["tissue"])


def test_marker_energy_is_label_independent_without_grouping():
    ds = synth.generate(synth.SynthConfig(n_bags=120, instances_min=32, instances_max=48, seed=4))
    axis = np.asarray(ds.truth["marker_axis"])
    energy = np.array([np.mean((b.instances.astype(np.float64) @ axis) ** 2) for b in ds.bags])
    mean = np.array([np.mean(b.instances.astype(np.float64) @ axis) for b in ds.bags])
    y = np.array([b.label for b in ds.bags])
    # the only label signal is the split between components 0 and 1
    assert abs(energy[y == 1].mean() - energy[y == 0].mean()) < 0.25 * energy.std()
    assert abs(mean[y == 1].mean() - mean[y == 0].mean()) < 0.25 * mean.std()


def test_default_config_oracle_is_near_perfect():
    assert bayes_oracle_auc(synth.generate()) >= 0.99


@pytest.mark.parametrize("bad", [dict(signal_fraction=0), dict(signal_fraction=1.5), dict(noise_sigma=-1),
                                 dict(n_bags=3), dict(instances_min=10, instances_max=5),
                                 dict(positive_rate=1.0), dict(dt=8), dict(d0=20, dt=16),
                                 dict(marker_low=2, marker_high=1), dict(batch_shift=-0.1)])
def test_invalid_configs(bad):
    with pytest.raises(InvalidConfig):
        synth.SynthConfig(**bad)


def test_from_dict_rejects_unknown():
    assert synth.SynthConfig.from_dict({"n_bags": 10}).n_bags == 10
    with pytest.raises(InvalidConfig, match="colour"):
        synth.SynthConfig.from_dict({"colour": 1})


@settings(max_examples=15, deadline=None)
@given(st.integers(6, 20), st.integers(1, 10), st.integers(0, 9), st.floats(0.05, 1.0))
def test_instance_counts_within_range(n_bags, lo, extra, frac):
    cfg = synth.SynthConfig(n_bags=n_bags, instances_min=lo, instances_max=lo + extra, d0=20, dt=13,
                            subtype_count=2, signal_fraction=frac, seed=n_bags)
    ds = synth.generate(cfg)
    assert len(ds.bags) == n_bags
    for bag in ds.bags:
        assert lo <= bag.n <= lo + extra
        assert np.isfinite(bag.instances).all()
