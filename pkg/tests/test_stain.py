import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptmil import stain as S
from promptmil.errors import DataError, InsufficientTissue, IoFailure

H_TRUE = np.array([0.65, 0.70, 0.29])
E_TRUE = np.array([0.07, 0.99, 0.11])


def unit(v):
    return v / np.linalg.norm(v)


def angle(a, b):
    return math.degrees(math.acos(float(np.clip(unit(a) @ unit(b), -1, 1))))


def mixed_patch(seed, h=H_TRUE, e=E_TRUE, size=64, cmax=1.5, noise=0.01):
    """Two known stains with uniform concentrations and 1% multiplicative noise."""
    rng = np.random.default_rng(seed)
    conc = rng.uniform(0, cmax, size=(size * size, 2))
    od = conc @ np.stack([unit(h), unit(e)])
    od = od * (1 + noise * rng.normal(size=od.shape))
    return S.od_to_rgb(od, size, size)


# -- optical density ----------------------------------------------------------

def test_od_examples():
    od = S.rgb_to_od(np.array([[[254, 0, 254]]], dtype=np.uint8))
    assert od[0, 0] == 0.0 and od[0, 2] == 0.0
    assert od[0, 1] == pytest.approx(2.40654, abs=1e-5)


def test_od_strictly_decreasing():
    od = S.rgb_to_od(np.repeat(np.arange(256, dtype=np.uint8)[:, None], 3, axis=1)[None])
    assert np.all(np.diff(od[:, 0]) < 0)


@given(st.lists(st.floats(0, 2.4), min_size=3, max_size=3))
def test_od_round_trip_within_quantization(vals):
    od = np.array([vals])
    back = S.rgb_to_od(S.od_to_rgb(od, 1, 1))
    # half a gray level in linear space, mapped through the log
    linear = S.I0 * 10 ** -od - 1
    lo = -np.log10((np.minimum(linear + 0.5, 255) + 1) / S.I0)
    hi = -np.log10((np.maximum(linear - 0.5, 0) + 1) / S.I0)
    assert np.all(back >= lo - 1e-12) and np.all(back <= hi + 1e-12)


# -- estimation ---------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_recovers_known_stains(seed):
    prof = S.estimate_stain_profile(mixed_patch(seed))
    assert angle(prof.stain_matrix[:, 0], H_TRUE) < 2.0
    assert angle(prof.stain_matrix[:, 1], E_TRUE) < 2.0


def test_recovers_reference_profile():
    h, e = S.DEFAULT_TARGET.stain_matrix.T
    prof = S.estimate_stain_profile(mixed_patch(11, h, e))
    assert angle(prof.stain_matrix[:, 0], h) < 2.0
    assert angle(prof.stain_matrix[:, 1], e) < 2.0


def test_white_patch_has_no_tissue():
    with pytest.raises(InsufficientTissue):
        S.estimate_stain_profile(S.RgbPatch(np.full((32, 32, 3), 255, np.uint8)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.3, 2.5))
def test_profile_columns_unit_nonnegative(seed, cmax):
    rng = np.random.default_rng(seed)
    h, e = rng.uniform(0.05, 1, size=3), rng.uniform(0.05, 1, size=3)
    prof = S.estimate_stain_profile(mixed_patch(seed, h, e, size=24, cmax=cmax))
    np.testing.assert_allclose(np.linalg.norm(prof.stain_matrix, axis=0), 1.0, atol=1e-6)
    assert np.all(prof.stain_matrix >= 0) and np.all(prof.max_concentrations > 0)


def test_pixel_order_invariance():
    patch = mixed_patch(3)
    perm = np.random.default_rng(0).permutation(64 * 64)
    shuffled = S.RgbPatch(patch.pixels.reshape(-1, 3)[perm].reshape(64, 64, 3))
    a, b = S.estimate_stain_profile(patch), S.estimate_stain_profile(shuffled)
    np.testing.assert_allclose(a.stain_matrix, b.stain_matrix, atol=1e-9)
    np.testing.assert_allclose(a.max_concentrations, b.max_concentrations, atol=1e-9)


# -- normalization ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_identity_target(seed):
    patch = mixed_patch(seed)
    prof = S.estimate_stain_profile(patch)
    out = S.normalize(patch, prof, prof)
    assert np.abs(out.pixels.astype(int) - patch.pixels).max() <= 1


def test_idempotent_up_to_quantization():
    patch = mixed_patch(4)
    once = S.normalize(patch, S.estimate_stain_profile(patch), S.DEFAULT_TARGET)
    twice = S.normalize(once, S.estimate_stain_profile(once), S.DEFAULT_TARGET)
    assert np.abs(twice.pixels.astype(int) - once.pixels).max() <= 1


@pytest.mark.parametrize("seed", range(3))
def test_reestimate_matches_target(seed):
    patch = mixed_patch(seed)
    out = S.normalize(patch, S.estimate_stain_profile(patch), S.DEFAULT_TARGET)
    prof = S.estimate_stain_profile(out)
    for i in range(2):
        assert angle(prof.stain_matrix[:, i], S.DEFAULT_TARGET.stain_matrix[:, i]) < 2.0
    np.testing.assert_allclose(prof.max_concentrations, S.DEFAULT_TARGET.max_concentrations, rtol=0.05)


@pytest.mark.parametrize("seed", range(5))
def test_no_clamping_when_target_is_lighter(seed):
    # concentrations reach 2.5, so the source max exceeds the target's on both stains
    patch = mixed_patch(seed, cmax=2.5)
    src = S.estimate_stain_profile(patch)
    tgt = S.DEFAULT_TARGET
    assert np.all(tgt.max_concentrations <= src.max_concentrations)
    od = S.rgb_to_od(patch)
    conc = np.linalg.lstsq(src.stain_matrix, od.T, rcond=None)[0].T
    resid = od - conc @ src.stain_matrix.T
    out_od = (conc * tgt.max_concentrations / src.max_concentrations) @ tgt.stain_matrix.T + resid
    linear = S.I0 * 10 ** -out_od - 1
    assert linear.min() >= -0.5 and linear.max() <= 255.5


# -- profiles and files -------------------------------------------------------

def test_profile_validation():
    with pytest.raises(DataError):
        S.StainProfile(np.ones((3, 2)), np.array([1.0, 1.0]))
    with pytest.raises(DataError):
        S.StainProfile(S.DEFAULT_TARGET.stain_matrix, np.array([1.0, 0.0]))


def test_profile_json_round_trip(tmp_path):
    S.save_profile(S.DEFAULT_TARGET, tmp_path / "p.json")
    back = S.load_profile(tmp_path / "p.json")
    np.testing.assert_array_equal(back.stain_matrix, S.DEFAULT_TARGET.stain_matrix)
    doc = json.loads((tmp_path / "p.json").read_text())
    assert set(doc) == {"stain_matrix", "max_concentrations"}
    (tmp_path / "bad.json").write_text("{\n  oops")
    with pytest.raises(DataError, match=r"bad.json:2:"):
        S.load_profile(tmp_path / "bad.json")


@pytest.mark.parametrize("suffix", [".png", ".ppm"])
def test_patch_io_lossless(tmp_path, suffix):
    patch = mixed_patch(2, size=16)
    S.write_patch(patch, tmp_path / f"a{suffix}")
    assert np.array_equal(S.read_patch(tmp_path / f"a{suffix}").pixels, patch.pixels)


def test_patch_io_errors(tmp_path):
    with pytest.raises(IoFailure):
        S.read_patch(tmp_path / "missing.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(DataError):
        S.read_patch(tmp_path / "junk.png")
    with pytest.raises(DataError):
        S.write_patch(mixed_patch(0, size=4), tmp_path / "x.jpg")


def test_from_bytes_checks_length():
    assert S.RgbPatch.from_bytes(2, 1, bytes(6)).pixels.shape == (1, 2, 3)
    with pytest.raises(DataError):
        S.RgbPatch.from_bytes(2, 2, bytes(6))


def test_normalize_directory(tmp_path):
    src, dst = tmp_path / "in", tmp_path / "out"
    src.mkdir()
    S.write_patch(mixed_patch(0, size=32), src / "tissue.png")
    white = S.RgbPatch(np.full((8, 8, 3), 255, np.uint8))
    S.write_patch(white, src / "blank.ppm")
    (src / "notes.txt").write_text("ignored")
    status = S.normalize_directory(src, dst)
    assert status == {"blank.ppm": "copied", "tissue.png": "normalized"}
    assert np.array_equal(S.read_patch(dst / "blank.ppm").pixels, white.pixels)
    assert not (dst / "notes.txt").exists()
