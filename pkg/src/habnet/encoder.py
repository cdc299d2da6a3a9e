"""Per-image bottleneck features and their assembly into day sequences.

Every (modality, day) image is mapped to a ``C x 7 x 7`` map whose central
``3 x 3`` block is kept, so features stay tied to the event location. The
per-day vector ``z_t`` concatenates the selected modalities in ascending
index order; each image contributes ``C * crop * crop`` values in
``(channel, row, col)`` order.
"""

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import DataError, FormatError, LayoutError, NumericalError
from .optim import Adam

log = logging.getLogger(__name__)

ENCODER_KINDS = ("crop_raw", "small_cnn", "imported")


def conv_out(n, k=3, stride=2, pad=1):
    return (n + 2 * pad - k) // stride + 1


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "small_cnn"
    channels: int = 64
    crop: int = 3
    final_size: int = 7
    input_size: int = 100
    widths: tuple = (16, 32, 64)  # hidden block widths; the last block emits `channels`
    per_modality: bool = False

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.crop > self.final_size or self.crop < 1:
            raise ValueError("crop must be between 1 and the final map size")
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.kind == "small_cnn":
            n = self.input_size
            for _ in range(self.n_blocks):
                n = conv_out(n)
            if n != self.final_size:
                raise ValueError(
                    f"{self.n_blocks} stride-2 blocks map {self.input_size} to {n}, not {self.final_size}"
                )

    @property
    def n_blocks(self):
        return len(self.widths) + 1

    @property
    def feature_length(self):
        """Length of one image's feature vector."""
        return self.channels * self.crop * self.crop

    def to_dict(self):
        return {
            "kind": self.kind, "channels": self.channels, "crop": self.crop,
            "final_size": self.final_size, "input_size": self.input_size,
            "widths": list(self.widths), "per_modality": self.per_modality,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --- feature layout --------------------------------------------------------

@dataclass(frozen=True)
class IndexMap:
    """Bijection between ``(t, m, c, r, col)`` and positions in ``z_all``.

    ``m`` is the position within the selected modality tuple.
    """

    n_days: int
    modalities: tuple
    channels: int
    crop: int = 3

    @property
    def shape(self):
        return (self.n_days, len(self.modalities), self.channels, self.crop, self.crop)

    @property
    def day_length(self):
        return len(self.modalities) * self.channels * self.crop * self.crop

    @property
    def size(self):
        return self.n_days * self.day_length

    def flat(self, t, m, c, r, col):
        return np.ravel_multi_index((t, m, c, r, col), self.shape)

    def unflat(self, k):
        return np.unravel_index(k, self.shape)

    def block_slices(self):
        """``{(t, modality_index): slice}`` over ``z_all``."""
        per = self.channels * self.crop * self.crop
        out = {}
        for t in range(self.n_days):
            for j, m in enumerate(self.modalities):
                s = (t * len(self.modalities) + j) * per
                out[(t, m)] = slice(s, s + per)
        return out


@dataclass
class FeatureSequence:
    event_id: str
    z: np.ndarray  # (T, |z_t|)
    index_map: IndexMap

    @property
    def z_all(self):
        return self.z.reshape(-1)


# --- crop_raw --------------------------------------------------------------

def block_mean(image, size):
    """Average ``image`` onto a ``size x size`` grid.

    Cell ``k`` of an axis of length ``n`` covers rows ``floor(k n / size)``
    up to ``floor((k+1) n / size)``, so uneven splits are handled.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]
    if h < size or w < size:
        raise LayoutError(f">= {size}x{size}", img.shape[-2:], "image size")
    re = (np.arange(size + 1) * h) // size
    ce = (np.arange(size + 1) * w) // size
    rows = np.add.reduceat(img, re[:-1], axis=-2)
    sums = np.add.reduceat(rows, ce[:-1], axis=-1)
    counts = np.outer(np.diff(re), np.diff(ce))
    return sums / counts


def central_crop(fmap, crop):
    n = fmap.shape[-2]
    lo = (n - crop) // 2
    return fmap[..., lo : lo + crop, lo : lo + crop]


def crop_raw(image, spec):
    return central_crop(block_mean(image, spec.final_size), spec.crop).reshape(*np.shape(image)[:-2], -1)


# --- small CNN ---------------------------------------------------------------

def init_cnn(spec, rng, in_channels=1):
    """He-uniform 3x3 kernels, zero biases. Kernels are (3, 3, Cin, Cout)."""
    params = []
    cin = in_channels
    for cout in spec.widths + (spec.channels,):
        lim = np.sqrt(6.0 / (9 * cin))
        params.append({"W": rng.uniform(-lim, lim, size=(3, 3, cin, cout)), "b": np.zeros(cout)})
        cin = cout
    return params


def _pad(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))


def _im2col(x, ho, wo):
    xp = _pad(x)
    cols = [xp[:, ki : ki + 2 * ho : 2, kj : kj + 2 * wo : 2, :] for ki in range(3) for kj in range(3)]
    return np.concatenate(cols, axis=-1)


def conv2d(x, W, b):
    """3x3, stride 2, zero-pad 1 convolution on NHWC input."""
    n, h, w, cin = x.shape
    ho, wo = conv_out(h), conv_out(w)
    cols = _im2col(x, ho, wo)
    return cols @ W.reshape(9 * cin, -1) + b


def conv2d_backward(x, W, dy):
    n, h, w, cin = x.shape
    ho, wo = dy.shape[1:3]
    cols = _im2col(x, ho, wo)
    cout = W.shape[-1]
    dW = cols.reshape(-1, 9 * cin).T @ dy.reshape(-1, cout)
    db = dy.reshape(-1, cout).sum(axis=0)
    dcols = (dy @ W.reshape(9 * cin, cout).T).reshape(n, ho, wo, 9, cin)
    dxp = np.zeros((n, h + 2, w + 2, cin), dtype=dy.dtype)
    for k in range(9):
        ki, kj = divmod(k, 3)
        dxp[:, ki : ki + 2 * ho : 2, kj : kj + 2 * wo : 2, :] += dcols[:, :, :, k, :]
    return dxp[:, 1:-1, 1:-1, :], dW.reshape(W.shape), db


def cnn_forward(images, params, spec, cache=None, dtype=np.float64):
    """Images ``(N, H, W)`` -> cropped features ``(N, C*crop*crop)``."""
    x = np.asarray(images, dtype=dtype)[..., None]
    for p in params:
        if cache is not None:
            cache.append(x)
        x = np.maximum(conv2d(x, p["W"].astype(dtype, copy=False), p["b"].astype(dtype, copy=False)), 0)
    if cache is not None:
        cache.append(x)
    crop = central_crop(np.moveaxis(x, -1, 1), spec.crop)  # (N, C, crop, crop)
    return crop.reshape(len(x), -1)


def cnn_backward(dfeat, params, spec, cache):
    """Gradients of every kernel and bias given d(loss)/d(features)."""
    out = cache[-1]
    n, s, _, c = out.shape
    lo = (s - spec.crop) // 2
    dmap = np.zeros_like(out)
    d = dfeat.reshape(n, c, spec.crop, spec.crop)
    dmap[:, lo : lo + spec.crop, lo : lo + spec.crop, :] = np.moveaxis(d, 1, -1)
    grads = [None] * len(params)
    for k in reversed(range(len(params))):
        x_in, y_out = cache[k], cache[k + 1]
        dpre = np.where(y_out > 0, dmap, 0.0)
        dmap, dW, db = conv2d_backward(x_in, params[k]["W"], dpre)
        grads[k] = {"W": dW, "b": db}
    return grads


def check_params(params, spec):
    expect = spec.widths + (spec.channels,)
    if len(params) != len(expect):
        raise LayoutError(len(expect), len(params), "convolution block count")
    for p, cout in zip(params, expect):
        if p["W"].shape[:2] != (3, 3) or p["W"].shape[-1] != cout:
            raise LayoutError(f"(3, 3, *, {cout})", p["W"].shape, "kernel shape")


# --- imported features -------------------------------------------------------

FEATURE_MAGIC = b"HABF"
FEATURE_VERSION = 1


@dataclass
class ImportedFeatures:
    """Precomputed per-image vectors, keyed by (event id, t, modality)."""

    event_ids: list
    modalities: tuple
    vectors: np.ndarray  # (E, T, M_sel, L) float32
    _pos: dict = field(default=None, repr=False)

    def __post_init__(self):
        self._pos = {e: k for k, e in enumerate(self.event_ids)}

    @property
    def feature_length(self):
        return self.vectors.shape[-1]

    def lookup(self, event_id, t, modality):
        try:
            e = self._pos[event_id]
        except KeyError:
            raise DataError(f"no imported features for event {event_id!r}") from None
        if modality not in self.modalities:
            raise DataError(f"imported features lack modality {modality}")
        if not 0 <= t < self.vectors.shape[1]:
            raise DataError(f"imported features lack day index {t}")
        return self.vectors[e, t, self.modalities.index(modality)]


def write_features(path, feats):
    E, T, M, L = feats.vectors.shape
    extra = json.dumps({"event_ids": list(feats.event_ids), "modalities": list(feats.modalities)}).encode()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<HIIII", FEATURE_VERSION, E, T, M, L))
        fh.write(struct.pack("<I", len(extra)) + extra)
        fh.write(np.ascontiguousarray(feats.vectors, dtype="<f4").tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file")
    version, E, T, M, L = struct.unpack_from("<HIIII", data, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature file version {version}")
    off = 4 + 18
    (n,) = struct.unpack_from("<I", data, off)
    meta = json.loads(data[off + 4 : off + 4 + n])
    off += 4 + n
    need = E * T * M * L * 4
    if len(data) - off != need:
        raise FormatError(f"{path}: payload is {len(data) - off} bytes, expected {need}")
    if len(meta["event_ids"]) != E or len(meta["modalities"]) != M:
        raise FormatError(f"{path}: header counts disagree with the id tables")
    vec = np.frombuffer(data, dtype="<f4", offset=off).reshape(E, T, M, L).astype(np.float32)
    return ImportedFeatures(list(meta["event_ids"]), tuple(meta["modalities"]), vec)


# --- encoding ----------------------------------------------------------------

def encode_images(images, spec, params=None, dtype=np.float64, batch=512):
    """Encode a stack ``(N, H, W)`` of already-masked images."""
    images = np.asarray(images)
    if spec.kind == "crop_raw":
        return crop_raw(images, spec)
    if spec.kind != "small_cnn":
        raise ValueError("imported features are looked up, not computed")
    if images.shape[-2:] != (spec.input_size, spec.input_size):
        raise LayoutError((spec.input_size, spec.input_size), images.shape[-2:], "image size")
    check_params(params, spec)
    out = [cnn_forward(images[i : i + batch], params, spec, dtype=dtype) for i in range(0, len(images), batch)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, spec.feature_length))


def encode_image(image, spec, params=None, mask=None, key=None):
    """Feature vector of one image.

    ``mask`` (optional) zeroes invalid cells first. For ``imported`` encoders
    ``params`` is an :class:`ImportedFeatures` and ``key`` is ``(event, t, m)``.
    """
    if spec.kind == "imported":
        v = params.lookup(*key)
        if v.shape[0] != spec.feature_length:
            raise LayoutError(spec.feature_length, v.shape[0], "imported feature length")
        return v.astype(np.float64)
    img = np.asarray(image, dtype=np.float64)
    if mask is not None:
        img = np.where(mask, img, 0.0)
    return encode_images(img[None], spec, params)[0]


def _cube_images(cube, modalities, normalizer, dtype=np.float64):
    idx = [cube.m(m) for m in modalities]
    vals = cube.values[idx]
    mask = cube.mask[idx]
    if normalizer is not None:
        order = [normalizer.modalities.index(m) for m in modalities]
        mean = normalizer.mean[order][:, None, None, None]
        sd = normalizer.sd[order][:, None, None, None]
        vals = (vals.astype(np.float64) - mean) / sd
    vals = np.where(mask, vals, 0.0).astype(dtype, copy=False)
    # (M, T, H, W) -> (T, M, H, W)
    return np.swapaxes(vals, 0, 1)


def encode_cubes(cubes, modalities, spec, params=None, normalizer=None, dtype=np.float64, chunk=8):
    """Encode several cubes; returns ``(N, T, |z_t|)`` features and the index map.

    With ``per_modality`` set, ``params`` maps modality -> weights.
    """
    modalities = tuple(modalities)
    if not cubes:
        raise ValueError("no cubes to encode")
    T = cubes[0].n_days
    imap = IndexMap(T, modalities, spec.channels, spec.crop)
    out = np.empty((len(cubes), T, imap.day_length))
    L = spec.feature_length
    for c in cubes:
        missing = set(modalities) - set(c.modalities)
        if missing:
            raise DataError(f"cube {c.event.id} lacks modalities {sorted(missing)}")
        if c.n_days != T:
            raise LayoutError(T, c.n_days, "days per cube")
    if spec.kind == "imported":
        for n, c in enumerate(cubes):
            for t in range(T):
                for j, m in enumerate(modalities):
                    out[n, t, j * L : (j + 1) * L] = encode_image(None, spec, params, key=(c.event.id, t, m))
        return out, imap
    # a few cubes at a time keeps the image stack small
    for s in range(0, len(cubes), chunk):
        part = cubes[s : s + chunk]
        imgs = np.stack([_cube_images(c, modalities, normalizer, dtype) for c in part])  # (n, T, M, H, W)
        if spec.per_modality and spec.kind == "small_cnn":
            for j, m in enumerate(modalities):
                f = encode_images(imgs[:, :, j].reshape(-1, *imgs.shape[-2:]), spec, params[m], dtype)
                out[s : s + len(part), :, j * L : (j + 1) * L] = f.reshape(len(part), T, L)
        else:
            f = encode_images(imgs.reshape(-1, *imgs.shape[-2:]), spec, params, dtype)
            out[s : s + len(part)] = f.reshape(len(part), T, -1)
    return out, imap


def encode_cube(cube, modalities, spec, params=None, normalizer=None):
    z, imap = encode_cubes([cube], modalities, spec, params, normalizer)
    return FeatureSequence(cube.event.id, z[0], imap)


# --- end-to-end encoder training -------------------------------------------------

@dataclass
class _JointModel:
    """Shared CNN applied to every (t, m) image, then one logistic unit."""

    spec: EncoderSpec
    cnn: list
    head: dict

    def params(self):
        out = {f"cnn{k}.{n}": v for k, p in enumerate(self.cnn) for n, v in p.items()}
        out.update({f"head.{n}": v for n, v in self.head.items()})
        return out

    def loss_and_grads(self, images, y):
        """``images`` is (B, K, H, W) with K images per sample."""
        B, K = images.shape[:2]
        cache = []
        f = cnn_forward(images.reshape(B * K, *images.shape[2:]), self.cnn, self.spec, cache)
        z = f.reshape(B, -1)
        logits = z @ self.head["w"] + self.head["b"]
        loss, dlog = nn.bce_with_logits(logits, y)
        grads = {"head.w": z.T @ dlog, "head.b": np.array([dlog.sum()])}
        dz = np.outer(dlog, self.head["w"]).reshape(B * K, -1)
        for k, g in enumerate(cnn_backward(dz, self.cnn, self.spec, cache)):
            grads[f"cnn{k}.W"] = g["W"]
            grads[f"cnn{k}.b"] = g["b"]
        return loss, grads


def joint_model(spec, n_images, rng):
    cnn = init_cnn(spec, rng)
    # zero head: every initial prediction is exactly 0.5
    head = {"w": np.zeros(n_images * spec.feature_length), "b": np.zeros(1)}
    return _JointModel(spec, cnn, head)


def joint_gradient_check(model, images, y, h=1e-6, floor=1e-5):
    """Normwise relative error of every joint-model gradient against central differences."""
    _, analytic = model.loss_and_grads(images, y)
    errors = {}
    for key, p in model.params().items():
        num = np.zeros_like(p)
        for j in np.ndindex(p.shape):
            old = p[j]
            p[j] = old + h
            lp, _ = model.loss_and_grads(images, y)
            p[j] = old - h
            lm, _ = model.loss_and_grads(images, y)
            p[j] = old
            num[j] = (lp - lm) / (2 * h)
        a = analytic[key]
        denom = max(np.linalg.norm(a) + np.linalg.norm(num), floor)
        errors[key] = float(np.linalg.norm(a - num) / denom)
    return errors


@dataclass
class EncoderTraining:
    params: list
    head: dict
    losses: list


def train_small_cnn(images, labels, spec, seed=0, lr=1e-3, decay=0.0, steps=200, batch_size=16):
    """Train the shared CNN jointly with a logistic head.

    ``images`` is ``(N, K, H, W)``: K masked, normalised images per sample
    (e.g. every selected modality on every day). Returns the trained
    encoder weights and the per-step loss curve.
    """
    if spec.kind != "small_cnn":
        raise ValueError("train_small_cnn needs a small_cnn spec")
    images = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if len(images) == 0:
        raise DataError("encoder training set is empty")
    if images.ndim != 4:
        raise LayoutError("(N, K, H, W)", images.shape, "encoder training images")
    rng = np.random.default_rng(seed)
    model = joint_model(spec, images.shape[1], rng)
    opt = Adam(lr=lr, decay=decay)
    losses = []
    n = len(images)
    order = rng.permutation(n)
    pos = 0
    for step in range(steps):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + batch_size]
        pos += batch_size
        loss, grads = model.loss_and_grads(images[idx], y[idx])
        if not np.isfinite(loss):
            raise NumericalError(f"encoder training loss became {loss} at step {step + 1}")
        losses.append(loss)
        opt.step(model.params(), grads)
    return EncoderTraining(model.cnn, model.head, losses)


def encoder_to_dict(spec, params):
    arrays = {}
    for k, p in enumerate(params or []):
        arrays[f"cnn{k}.W"] = p["W"]
        arrays[f"cnn{k}.b"] = p["b"]
    return arrays


def encoder_from_arrays(spec, arrays):
    params = []
    for k in range(spec.n_blocks):
        params.append({"W": np.asarray(arrays[f"cnn{k}.W"], float), "b": np.asarray(arrays[f"cnn{k}.b"], float)})
    check_params(params, spec)
    return params
