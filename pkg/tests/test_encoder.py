import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from habnet import encoder as E
from habnet import modalities as mods
from habnet.errors import DataError, FormatError, LayoutError

RAW = E.EncoderSpec("crop_raw", channels=1)
CNN = E.EncoderSpec("small_cnn", channels=16, widths=(4, 8, 8))
TINY = E.EncoderSpec("small_cnn", channels=2, crop=2, final_size=2, input_size=8, widths=(3,))


# --- crop_raw -----------------------------------------------------------------------

def test_crop_raw_zero_image():
    assert np.all(E.crop_raw(np.zeros((100, 100)), RAW) == 0)
    assert E.crop_raw(np.zeros((100, 100)), RAW).shape == (9,)


def block_mean_oracle(img, size):
    h, w = img.shape
    out = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            out[i, j] = img[i * h // size : (i + 1) * h // size, j * w // size : (j + 1) * w // size].mean()
    return out


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(7, 40), st.integers(7, 40))
def test_block_mean_matches_loops(seed, h, w):
    img = np.random.default_rng(seed).normal(size=(h, w))
    assert np.allclose(E.block_mean(img, 7), block_mean_oracle(img, 7), rtol=0, atol=1e-12)


def test_crop_raw_keeps_the_centre():
    img = np.zeros((100, 100))
    img[50, 50] = 1.0
    f = E.crop_raw(img, RAW).reshape(3, 3)
    assert f[1, 1] > 0 and f.sum() == f[1, 1]


def test_feature_length_with_1056_channels():
    assert E.EncoderSpec("crop_raw", channels=1056).feature_length == 9504


# --- layout -----------------------------------------------------------------------------

def test_day_lengths():
    assert E.IndexMap(10, mods.ALL, 1056).day_length == 114_048
    assert E.IndexMap(10, mods.IMPORTANT_SUBSET, 1056).day_length == 47_520
    im = E.IndexMap(10, mods.ALL, 1056)
    assert im.size == 10 * im.day_length


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 6), st.data())
def test_index_map_bijection(T, M, C, data):
    im = E.IndexMap(T, tuple(range(1, M + 1)), C)
    k = data.draw(st.integers(0, im.size - 1))
    assert im.flat(*im.unflat(k)) == k


def test_block_slices_tile_z_all():
    im = E.IndexMap(3, (3, 12), 4)
    cover = np.zeros(im.size, int)
    for s in im.block_slices().values():
        cover[s] += 1
    assert np.all(cover == 1)
    t, m, *_ = im.unflat(im.block_slices()[(2, 12)].start)
    assert (t, m) == (2, 1)


def test_encode_cube_layout(small_events):
    _, events = small_events
    cube = events[0].cube
    spec = E.EncoderSpec("crop_raw", channels=1)
    seq = E.encode_cube(cube, (12, 3), spec)
    assert seq.z.shape == (cube.n_days, 18)
    k3 = cube.m(3)
    img = np.where(cube.mask[k3, 4], cube.values[k3, 4], 0.0)
    # modality 3 is second in the requested order
    assert np.allclose(seq.z[4, 9:], E.crop_raw(img, spec), rtol=0, atol=1e-12)
    assert seq.z_all.shape == (cube.n_days * 18,)


# --- small CNN --------------------------------------------------------------------------

def test_spec_requires_consistent_sizes():
    with pytest.raises(ValueError):
        E.EncoderSpec("small_cnn", input_size=64)
    with pytest.raises(ValueError):
        E.EncoderSpec("crop_raw", crop=8)


def test_cnn_output_shape():
    params = E.init_cnn(CNN, np.random.default_rng(0))
    f = E.encode_images(np.random.default_rng(1).normal(size=(3, 100, 100)), CNN, params)
    assert f.shape == (3, 16 * 9)


def conv_oracle(x, W, b):
    """Direct loops over output pixels for one NHWC image."""
    h, w, cin = x.shape
    ho, wo = E.conv_out(h), E.conv_out(w)
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((ho, wo, W.shape[-1]))
    for i in range(ho):
        for j in range(wo):
            patch = xp[2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :]
            out[i, j] = np.tensordot(patch, W, axes=([0, 1, 2], [0, 1, 2])) + b
    return out


@pytest.mark.parametrize("h,w", [(8, 8), (7, 9), (13, 13)])
def test_conv_matches_loops(h, w):
    rng = np.random.default_rng(h * w)
    x = rng.normal(size=(1, h, w, 2))
    W, b = rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    assert np.allclose(E.conv2d(x, W, b)[0], conv_oracle(x[0], W, b), rtol=0, atol=1e-12)


def test_translation_sensitivity():
    params = E.init_cnn(CNN, np.random.default_rng(2))
    for p in params:
        p["b"] = np.full_like(p["b"], 0.01)
    a = np.zeros((2, 100, 100))
    a[0, 50, 50] = 10.0
    a[1, 80, 50] = 10.0
    for spec, prm in ((RAW, None), (CNN, params)):
        f = E.encode_images(a, spec, prm)
        assert not np.allclose(f[0], f[1])


def test_cnn_gradcheck():
    rng = np.random.default_rng(3)
    model = E.joint_model(TINY, 2, rng)
    for p in model.cnn:
        p["b"] = rng.normal(0, 0.3, p["b"].shape)
    model.head["w"] = rng.normal(size=model.head["w"].shape)
    images = rng.normal(size=(4, 2, 8, 8))
    err = E.joint_gradient_check(model, images, np.array([1.0, 0.0, 0.0, 1.0]))
    assert max(err.values()) < 1e-4, err


def test_zero_head_predicts_half():
    rng = np.random.default_rng(4)
    model = E.joint_model(TINY, 3, rng)
    loss, _ = model.loss_and_grads(rng.normal(size=(5, 3, 8, 8)), np.array([1.0, 0, 1, 0, 1]))
    assert loss == pytest.approx(np.log(2.0), abs=1e-15)


def test_training_reduces_loss():
    rng = np.random.default_rng(5)
    y = np.repeat([0.0, 1.0], 20)
    images = rng.normal(0, 0.3, size=(40, 1, 8, 8))
    images[y == 1, 0, 3:5, 3:5] += 2.0
    out = E.train_small_cnn(images, y, TINY, seed=0, lr=1e-2, steps=50, batch_size=8)
    assert np.mean(out.losses[-5:]) < np.mean(out.losses[:5])
    again = E.train_small_cnn(images, y, TINY, seed=0, lr=1e-2, steps=50, batch_size=8)
    assert all(np.array_equal(p["W"], q["W"]) for p, q in zip(out.params, again.params))


def test_params_layout_checked():
    params = E.init_cnn(CNN, np.random.default_rng(6))
    with pytest.raises(LayoutError):
        E.encode_images(np.zeros((1, 100, 100)), CNN, params[:-1])
    with pytest.raises(LayoutError):
        E.encode_images(np.zeros((1, 64, 64)), CNN, params)


def test_encoder_arrays_round_trip():
    params = E.init_cnn(CNN, np.random.default_rng(7))
    back = E.encoder_from_arrays(CNN, E.encoder_to_dict(CNN, params))
    assert all(np.array_equal(p["W"], q["W"]) for p, q in zip(params, back))


# --- imported features --------------------------------------------------------------------

def imported(rng, L=18):
    return E.ImportedFeatures(["a", "b"], (3, 12), rng.normal(size=(2, 4, 2, L)).astype(np.float32))


def test_imported_round_trip(tmp_path):
    feats = imported(np.random.default_rng(8))
    E.write_features(tmp_path / "f.habf", feats)
    back = E.read_features(tmp_path / "f.habf")
    assert back.event_ids == ["a", "b"] and back.modalities == (3, 12)
    assert np.array_equal(back.vectors, feats.vectors)


def test_imported_lookup_and_errors(tmp_path):
    feats = imported(np.random.default_rng(9), L=18)
    spec = E.EncoderSpec("imported", channels=2)
    v = E.encode_image(None, spec, feats, key=("b", 3, 12))
    assert np.array_equal(v, feats.vectors[1, 3, 1].astype(np.float64))
    with pytest.raises(DataError):
        feats.lookup("zz", 0, 3)
    with pytest.raises(DataError):
        feats.lookup("a", 0, 5)
    with pytest.raises(LayoutError):
        E.encode_image(None, E.EncoderSpec("imported", channels=3), feats, key=("a", 0, 3))
    E.write_features(tmp_path / "f.habf", feats)
    data = (tmp_path / "f.habf").read_bytes()
    (tmp_path / "g.habf").write_bytes(data[:-4])
    with pytest.raises(FormatError):
        E.read_features(tmp_path / "g.habf")
