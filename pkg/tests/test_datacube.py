from dataclasses import replace
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from habnet import datacube as D
from habnet import modalities as mods
from habnet import synth
from habnet.cmr import SwathScene
from habnet.errors import FormatError
from habnet.gridding import GridSpec, unproject
from habnet.groundtruth import EventRecord

EVENT = EventRecord("e1", 27.0, -82.5, date(2018, 1, 10), "Karenia brevis", 1e5, "HAB")


def blank_cube(modalities=(3,), T=10, H=10, W=10, event=EVENT):
    spec = GridSpec(event.lat, event.lon, 1000.0, W, H)
    shape = (len(modalities), T, H, W)
    return D.Datacube(event, spec, tuple(modalities), D.cube_days(event.date, T),
                      np.zeros(shape, np.float32), np.zeros(shape, bool))


def random_cube(seed, modalities=(1, 2, 3, 12), T=4, H=6, W=5):
    rng = np.random.default_rng(seed)
    c = blank_cube(modalities, T, H, W)
    c.mask[:] = rng.random(c.mask.shape) > 0.3
    c.values[:] = np.where(c.mask, rng.normal(size=c.mask.shape), 0).astype(np.float32)
    return c


def constant_scene(m, day, value, spec, spacing=900.0):
    g = np.arange(-(spec.width + 6) * spec.cell_size / 2, (spec.width + 6) * spec.cell_size / 2, spacing)
    x, y = (a.ravel() for a in np.meshgrid(g, g))
    lat, lon = unproject(x, y, spec)
    return SwathScene(m, day, lat, lon, np.full(len(x), value))


# --- assembly ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def swath_event():
    cfg = synth.SynthConfig(n_per_class=1, cloud_fraction=0.0, mode="swath")
    f = synth.draw_fields(cfg, 0)
    spec = GridSpec(f.record.lat, f.record.lon)
    scenes = synth.swath_scenes(cfg, f, spec)
    return cfg, f, spec, scenes, D.assemble_datacube(f.record, scenes, spec)


def test_full_coverage_dims(swath_event):
    *_, cube = swath_event
    assert cube.shape == (12, 10, 100, 100)
    assert cube.modalities == mods.ALL
    assert cube.mask.all()
    D.check_invariants(cube)


def test_missing_terra_isolated():
    cfg = synth.SynthConfig(n_per_class=1, cloud_fraction=0.0, mode="swath", width=30, height=30)
    f = synth.draw_fields(cfg, 0)
    spec = GridSpec(f.record.lat, f.record.lon, 1000.0, 30, 30)
    scenes = synth.swath_scenes(cfg, f, spec)
    full = D.assemble_datacube(f.record, scenes, spec)
    no_terra = {k: v for k, v in scenes.items() if k[0] != mods.CHLA_TERRA}
    cube = D.assemble_datacube(f.record, no_terra, spec)
    k = cube.m(mods.CHLA_TERRA)
    assert not cube.mask[k].any() and np.all(cube.values[k] == 0)
    others = [i for i in range(12) if i != k]
    assert np.array_equal(cube.values[others], full.values[others])
    assert np.array_equal(cube.mask[others], full.mask[others])


def test_anomaly_is_chl_minus_bimonthly():
    spec = GridSpec(27.0, -82.5, 1000.0, 12, 12)
    day = EVENT.date
    scenes = {(3, day): constant_scene(3, day, 5.0, spec), (2, day): constant_scene(2, day, 3.0, spec)}
    cube = D.assemble_datacube(EVENT, scenes, spec, modalities=(2, 3, 12), n_days=1)
    k = cube.m(12)
    assert cube.mask[k].all()
    assert np.all(cube.values[k] == np.float32(2.0))


def test_derive_anomaly_cellwise():
    vals = np.zeros((3, 1, 2, 2), np.float32)
    mask = np.ones(vals.shape, bool)
    vals[0, 0, 0, 0], vals[1, 0, 0, 0] = 3.0, 5.0  # modality order (2, 3, 12)
    mask[0, 0, 1, 1] = False
    D.derive_anomaly(vals, mask, (2, 3, 12))
    assert vals[2, 0, 0, 0] == 2.0
    assert not mask[2, 0, 1, 1] and vals[2, 0, 1, 1] == 0.0


def test_bimonthly_falls_back_to_trailing_mean():
    spec = GridSpec(27.0, -82.5, 1000.0, 8, 8)
    scenes = {}
    for back, v in ((1, 2.0), (3, 4.0), (61, 100.0)):
        d = EVENT.date - timedelta(days=back)
        scenes[(3, d)] = constant_scene(3, d, v, spec)
    scenes[(3, EVENT.date)] = constant_scene(3, EVENT.date, 50.0, spec)
    cube = D.assemble_datacube(EVENT, scenes, spec, modalities=(2, 3), n_days=1)
    k = cube.m(2)
    # days t-1 and t-3 inside the 60-day window; the event day itself and t-61 are not
    assert np.allclose(cube.values[k, 0][cube.mask[k, 0]], 3.0)
    assert cube.mask[k, 0].all()


def test_bathymetry_static(swath_event):
    *_, cube = swath_event
    k = cube.m(1)
    assert np.all(cube.values[k] == cube.values[k, :1])


def test_swath_pipeline_matches_raster_rendering():
    cfg = synth.SynthConfig(n_per_class=1, cloud_fraction=0.0, noise_sd=0.0, width=30, height=30, modalities=(1, 2, 3))
    f = synth.draw_fields(cfg, 0)
    spec = GridSpec(f.record.lat, f.record.lon, 1000.0, 30, 30)
    raster = synth.generate_event(cfg, 0).cube
    swath = D.assemble_datacube(f.record, synth.swath_scenes(cfg, f, spec), spec,
                                modalities=cfg.modalities, n_days=cfg.n_days)
    k = raster.m(2)
    rel = np.abs(swath.values[k] - raster.values[k]) / np.abs(raster.values[k])
    assert swath.mask.all() and rel.max() < 0.01


# --- sparsity -------------------------------------------------------------------------

@pytest.mark.parametrize("n_missing,keep", [(490, True), (500, True), (510, False)])
def test_sparsity_boundary(n_missing, keep):
    c = blank_cube()
    flat = np.ones(c.mask[0].size, bool)
    flat[np.random.default_rng(n_missing).permutation(flat.size)[:n_missing]] = False
    c.mask[0] = flat.reshape(c.mask[0].shape)
    d = D.sparsity_filter(c)
    assert d.keep is keep
    assert d.missing_fraction == n_missing / 1000


def test_sparsity_uses_only_chl():
    c = blank_cube((3, 5))
    c.mask[0] = True
    assert D.sparsity_filter(c).keep


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 1000))
def test_sparsity_rule_property(n_missing):
    c = blank_cube()
    flat = np.ones(1000, bool)
    flat[:n_missing] = False
    c.mask[0] = flat.reshape(10, 10, 10)
    assert D.sparsity_filter(c).keep == (2 * n_missing <= 1000)


# --- file format -------------------------------------------------------------------------

def test_round_trip_byte_identical(tmp_path):
    c = random_cube(0)
    D.write_cube(c, tmp_path / "a.habc")
    back = D.read_cube(tmp_path / "a.habc")
    assert D.cube_to_bytes(back) == (tmp_path / "a.habc").read_bytes()
    assert np.array_equal(back.values, c.values) and np.array_equal(back.mask, c.mask)
    assert back.event == c.event and back.days == c.days and back.modalities == c.modalities


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 5), st.integers(1, 9), st.integers(1, 9))
def test_round_trip_property(seed, m, t, h, w):
    c = random_cube(seed, tuple(range(1, m + 1)), t, h, w)
    buf = D.cube_to_bytes(c)
    assert D.cube_to_bytes(D.cube_from_bytes(buf)) == buf


def test_wrong_magic(tmp_path):
    buf = bytearray(D.cube_to_bytes(random_cube(1)))
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError, match="magic"):
        D.cube_from_bytes(bytes(buf))


def test_truncated_payload():
    buf = D.cube_to_bytes(random_cube(1))
    with pytest.raises(FormatError):
        D.cube_from_bytes(buf[:-1])


def test_payload_length_for_full_cube():
    n = 12 * 10 * 100 * 100
    assert D.payload_size(12, 10, 100, 100) == 4 * n + n // 8
    c = blank_cube(mods.ALL, 10, 100, 100)
    buf = D.cube_to_bytes(c)
    header = len(buf) - D.payload_size(12, 10, 100, 100)
    assert len(buf) - header == 4 * n + n // 8


# --- normalisation ------------------------------------------------------------------------

def test_affine_normalisation():
    c = blank_cube()
    c.mask[0, 0, :2] = True
    c.values[0, 0, 0] = -2.0
    c.values[0, 0, 1] = 6.0  # mean 2, SD 4
    norm = D.fit_normalizer([c])
    assert norm.mean[0] == 2.0 and norm.sd[0] == 4.0
    assert norm.apply(np.array([[6.0]]), np.array([[True]]))[0, 0] == 1.0


def test_all_masked_modality_identity():
    c = blank_cube((3, 5))
    c.mask[0] = True
    c.values[0] = 1.0 + np.arange(1000, dtype=np.float32).reshape(10, 10, 10) % 3
    norm = D.fit_normalizer([c])
    assert norm.mean[1] == 0.0 and norm.sd[1] == 1.0


def test_held_out_mutation_cannot_reach_statistics():
    train = [random_cube(s) for s in range(4)]
    held = [random_cube(s) for s in range(10, 13)]
    norm, tr, ho = D.normalize_for_training(train, held)
    for c in held:
        c.values[:] = np.float32(1e6)
        c.mask[:] = True
    norm2, tr2, ho2 = D.normalize_for_training(train, held)
    assert norm2.fingerprint() == norm.fingerprint()
    assert all(np.array_equal(a, b) for a, b in zip(tr, tr2))
    assert not np.array_equal(ho[0], ho2[0])


def test_normalizer_serialisation():
    norm = D.fit_normalizer([random_cube(0)])
    back = D.Normalizer.from_dict(norm.to_dict())
    assert back.fingerprint() == norm.fingerprint()


# --- index ------------------------------------------------------------------------------------

def test_index_round_trip(tmp_path):
    entries = [D.IndexEntry(tmp_path / "a.habc", "a", "HAB", 0.1, True),
               D.IndexEntry(tmp_path / "b.habc", "b", "NoHAB", 0.7, False)]
    D.write_index(entries, tmp_path)
    kept = D.read_index(tmp_path)
    assert [e.id for e in kept] == ["a"] and kept[0].y == 1
    assert len(D.read_index(tmp_path, kept_only=False)) == 2


def test_subset_copies():
    c = random_cube(0)
    s = c.subset((12, 3))
    assert s.modalities == (12, 3)
    assert np.array_equal(s.values[0], c.values[c.m(12)])
    s.values[:] = 0
    assert c.values.any()
