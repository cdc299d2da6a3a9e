"""Event datacubes: assembly, sparsity filtering, normalisation, file IO.

A cube holds M modalities x T days x H x W grid values with a validity
mask. Day index T-1 (zero-based) is the event date unless ``end_offset`` is
set. Masked cells always hold 0.

``.habc`` layout (little-endian)::

    b"HABC"  u16 version=1
    u32 M, T, H, W
    u16[M]   modality ids
    f64 lat, f64 lon, i64 event epoch-day
    u32 n, n bytes of UTF-8 JSON (event id/label, cell size, end offset)
    f32[M*T*H*W] values, [m][t][h][w] row-major
    packed mask bits in the same order (LSB first), ceil(M*T*H*W/8) bytes
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from . import modalities as mods
from .errors import FormatError
from .gridding import DEFAULT_ALPHA_RADIUS, GridSpec, resample_scene
from .groundtruth import EventRecord

log = logging.getLogger(__name__)

MAGIC = b"HABC"
VERSION = 1
EPOCH = date(1970, 1, 1)
DEFAULT_DAYS = 10
DEFAULT_BIMONTHLY_WINDOW = 60
_HEAD = struct.Struct("<4sH4I")
_GEO = struct.Struct("<ddq")


@dataclass
class Datacube:
    event: EventRecord
    spec: GridSpec
    modalities: tuple
    days: tuple
    values: np.ndarray  # float32 (M, T, H, W)
    mask: np.ndarray  # bool (M, T, H, W)
    end_offset: int = 0
    coverage: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_days(self):
        return self.values.shape[1]

    def m(self, modality):
        """Position of a modality id within this cube."""
        try:
            return self.modalities.index(modality)
        except ValueError:
            raise KeyError(f"modality {modality} not in cube") from None

    def slab(self, modality, t):
        k = self.m(modality)
        return self.values[k, t], self.mask[k, t]

    def subset(self, modalities):
        """A cube holding only ``modalities`` (copies, in the given order)."""
        idx = [self.m(m) for m in modalities]
        cov = {m: self.coverage[m] for m in modalities if m in self.coverage}
        return Datacube(self.event, self.spec, tuple(modalities), self.days,
                        self.values[idx].copy(), self.mask[idx].copy(), self.end_offset, cov)


def cube_days(event_date, n_days=DEFAULT_DAYS, end_offset=0):
    last = event_date - timedelta(days=end_offset)
    return tuple(last - timedelta(days=n_days - 1 - i) for i in range(n_days))


def _merge(scenes):
    if not isinstance(scenes, (list, tuple)):
        return scenes
    if len(scenes) == 1:
        return scenes[0]
    from .cmr import SwathScene

    first = scenes[0]
    return SwathScene(
        first.modality,
        first.day,
        np.concatenate([s.lats for s in scenes]),
        np.concatenate([s.lons for s in scenes]),
        np.concatenate([s.values for s in scenes]),
    )


def _bathymetry_scene(scenes):
    for (m, _day), sc in scenes.items():
        if m == mods.BATHYMETRY:
            return sc
    return None


def assemble_datacube(
    event,
    scenes,
    spec=None,
    alpha_radius=DEFAULT_ALPHA_RADIUS,
    modalities=mods.ALL,
    n_days=DEFAULT_DAYS,
    end_offset=0,
    bimonthly_window=DEFAULT_BIMONTHLY_WINDOW,
):
    """Build a datacube for one event from swath scenes.

    ``scenes`` maps ``(modality, day)`` to a scene or list of scenes (several
    granules on one day are merged). Bathymetry may be keyed with any day.
    Missing pairs give fully masked slabs. Without bimonthly scenes, the
    bimonthly layer is the mean of valid Chl-a over the preceding
    ``bimonthly_window`` days (Chl-a scenes before the cube window are used
    when supplied). The anomaly layer is derived last.
    """
    spec = spec or GridSpec(event.lat, event.lon)
    days = cube_days(event.date, n_days, end_offset)
    modalities = tuple(modalities)
    h, w = spec.shape
    values = np.zeros((len(modalities), n_days, h, w), dtype=np.float32)
    mask = np.zeros(values.shape, dtype=bool)
    cache = {}

    def layer(m, day):
        key = (m, day)
        if key not in cache:
            sc = scenes.get(key)
            cache[key] = None if sc is None else resample_scene(_merge(sc), spec, alpha_radius)
        return cache[key]

    for k, m in enumerate(modalities):
        if m in (mods.CHLA_ANOMALY,):
            continue
        if m == mods.BATHYMETRY:
            sc = _bathymetry_scene(scenes)
            if sc is not None:
                lay = resample_scene(_merge(sc), spec, alpha_radius)
                values[k] = lay.values.astype(np.float32)
                mask[k] = lay.mask
            continue
        for t, day in enumerate(days):
            lay = layer(m, day)
            if lay is None and m == mods.CHLA_BIMONTHLY:
                lay = _trailing_chl_mean(layer, day, bimonthly_window)
            if lay is not None:
                values[k, t] = lay.values.astype(np.float32)
                mask[k, t] = lay.mask

    if mods.CHLA_ANOMALY in modalities:
        derive_anomaly(values, mask, modalities)
    cube = Datacube(event, spec, modalities, days, values, mask, end_offset)
    cube.coverage = coverage(cube)
    return cube


def _trailing_chl_mean(layer, day, window):
    total = None
    count = None
    for back in range(1, window + 1):
        lay = layer(mods.CHLA, day - timedelta(days=back))
        if lay is None:
            continue
        if total is None:
            total = np.zeros_like(lay.values)
            count = np.zeros(lay.values.shape, dtype=np.int64)
        total += np.where(lay.mask, lay.values, 0.0)
        count += lay.mask
    if total is None:
        return None
    from .gridding import RasterLayer

    ok = count > 0
    return RasterLayer(np.where(ok, total / np.maximum(count, 1), 0.0), ok)


def derive_anomaly(values, mask, modalities):
    k12 = modalities.index(mods.CHLA_ANOMALY)
    if mods.CHLA not in modalities or mods.CHLA_BIMONTHLY not in modalities:
        values[k12] = 0.0
        mask[k12] = False
        return
    k3 = modalities.index(mods.CHLA)
    k2 = modalities.index(mods.CHLA_BIMONTHLY)
    both = mask[k3] & mask[k2]
    values[k12] = np.where(both, values[k3] - values[k2], np.float32(0.0))
    mask[k12] = both


def coverage(cube):
    """Fraction of valid cells per modality id."""
    per = cube.mask.reshape(cube.mask.shape[0], -1).mean(axis=1)
    return {int(m): float(f) for m, f in zip(cube.modalities, per)}


@dataclass(frozen=True)
class SparsityDecision:
    keep: bool
    missing_fraction: float


def sparsity_filter(cube, max_missing_fraction=0.5):
    """Discard a cube when more than ``max_missing_fraction`` of its Chl-a
    cells, pooled over all days, are missing."""
    chl = cube.mask[cube.m(mods.CHLA)]
    total = chl.size
    missing = total - int(np.count_nonzero(chl))
    return SparsityDecision(keep=not missing > max_missing_fraction * total, missing_fraction=missing / total)


def check_invariants(cube):
    """Raise AssertionError if a cube violates the datacube invariants."""
    assert cube.values.dtype == np.float32 and cube.mask.dtype == bool
    assert cube.values.shape == cube.mask.shape
    assert np.all(cube.values[~cube.mask] == 0), "masked cells must be zero"
    assert np.all(np.isfinite(cube.values)), "values must be finite"
    if mods.BATHYMETRY in cube.modalities:
        k = cube.m(mods.BATHYMETRY)
        assert np.all(cube.values[k] == cube.values[k, :1]) and np.all(cube.mask[k] == cube.mask[k, :1])
    if {mods.CHLA, mods.CHLA_BIMONTHLY, mods.CHLA_ANOMALY} <= set(cube.modalities):
        k3, k2, k12 = cube.m(mods.CHLA), cube.m(mods.CHLA_BIMONTHLY), cube.m(mods.CHLA_ANOMALY)
        both = cube.mask[k3] & cube.mask[k2]
        assert np.array_equal(cube.mask[k12], both)
        assert np.array_equal(cube.values[k12][both], (cube.values[k3] - cube.values[k2])[both])


# --- file format -----------------------------------------------------------


def _metadata(cube):
    ev = cube.event
    meta = {
        "id": ev.id,
        "label": ev.label,
        "species": ev.species,
        "concentration": ev.concentration,
        "cell_size": cube.spec.cell_size,
        "end_offset": cube.end_offset,
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def cube_to_bytes(cube):
    m, t, h, w = cube.values.shape
    if (h, w) != cube.spec.shape:
        raise FormatError("cube grid does not match its spec")
    meta = _metadata(cube)
    parts = [
        _HEAD.pack(MAGIC, VERSION, m, t, h, w),
        struct.pack(f"<{m}H", *cube.modalities),
        _GEO.pack(cube.event.lat, cube.event.lon, (cube.event.date - EPOCH).days),
        struct.pack("<I", len(meta)),
        meta,
        np.ascontiguousarray(cube.values, dtype="<f4").tobytes(),
        np.packbits(cube.mask.ravel(), bitorder="little").tobytes(),
    ]
    return b"".join(parts)


def write_cube(cube, path):
    data = cube_to_bytes(cube)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def payload_size(m, t, h, w):
    n = m * t * h * w
    return 4 * n + (n + 7) // 8


def cube_from_bytes(buf, source="<bytes>"):
    if len(buf) < _HEAD.size:
        raise FormatError(f"{source}: truncated header")
    magic, version, m, t, h, w = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if min(m, t, h, w) == 0:
        raise FormatError(f"{source}: zero dimension in header")
    off = _HEAD.size
    try:
        mod_ids = struct.unpack_from(f"<{m}H", buf, off)
        off += 2 * m
        lat, lon, epoch_day = _GEO.unpack_from(buf, off)
        off += _GEO.size
        (n_meta,) = struct.unpack_from("<I", buf, off)
        off += 4
        meta = json.loads(bytes(buf[off : off + n_meta]).decode("utf-8"))
        off += n_meta
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{source}: corrupt header: {exc}") from exc
    n = m * t * h * w
    if len(buf) - off != payload_size(m, t, h, w):
        raise FormatError(f"{source}: payload is {len(buf) - off} bytes, header implies {payload_size(m, t, h, w)}")
    values = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(m, t, h, w)
    off += 4 * n
    bits = np.frombuffer(buf, dtype=np.uint8, offset=off)
    mask = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(m, t, h, w)
    event_date = EPOCH + timedelta(days=epoch_day)
    event = EventRecord(
        id=meta["id"],
        lat=lat,
        lon=lon,
        date=event_date,
        species=meta.get("species", ""),
        concentration=meta.get("concentration"),
        label=meta["label"],
    )
    end_offset = int(meta.get("end_offset", 0))
    spec = GridSpec(lat, lon, float(meta.get("cell_size", 1000.0)), w, h)
    cube = Datacube(event, spec, tuple(mod_ids), cube_days(event_date, t, end_offset), values, mask, end_offset)
    cube.coverage = coverage(cube)
    return cube


def read_cube(path):
    path = Path(path)
    return cube_from_bytes(path.read_bytes(), str(path))


# --- normalisation ---------------------------------------------------------


@dataclass
class Normalizer:
    """Per-modality affine maps ``(v - mean) / sd`` fitted on valid cells."""

    modalities: tuple
    mean: np.ndarray
    sd: np.ndarray

    def apply(self, cube_or_values, mask=None):
        if mask is None:
            cube = cube_or_values
            vals, mask, order = cube.values, cube.mask, [self.modalities.index(m) for m in cube.modalities]
        else:
            vals, order = cube_or_values, list(range(len(self.modalities)))
        mean = self.mean[order].reshape(-1, *([1] * (vals.ndim - 1)))
        sd = self.sd[order].reshape(-1, *([1] * (vals.ndim - 1)))
        out = (vals.astype(np.float64) - mean) / sd
        return np.where(mask, out, 0.0).astype(np.float32)

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(np.asarray(self.modalities, dtype="<i4").tobytes())
        h.update(np.asarray(self.mean, dtype="<f8").tobytes())
        h.update(np.asarray(self.sd, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_dict(self):
        return {"modalities": list(self.modalities), "mean": self.mean.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["modalities"]), np.asarray(d["mean"], float), np.asarray(d["sd"], float))


def fit_normalizer(cubes, modalities=None):
    """Fit per-modality statistics over the valid cells of ``cubes``.

    ``cubes`` may be any iterable (e.g. a lazy loader); it is consumed once.
    All-masked or zero-variance modalities get the identity transform.
    """
    n = s = ss = None
    for cube in cubes:
        if modalities is None:
            modalities = tuple(cube.modalities)
        if n is None:
            n = np.zeros(len(modalities))
            s = np.zeros(len(modalities))
            ss = np.zeros(len(modalities))
        for k, m in enumerate(modalities):
            j = cube.m(m)
            v = cube.values[j][cube.mask[j]].astype(np.float64)
            n[k] += v.size
            s[k] += v.sum()
            ss[k] += np.dot(v, v)
    if n is None:
        raise ValueError("normalisation needs a non-empty training set")
    mean = np.zeros(len(modalities))
    sd = np.ones(len(modalities))
    for k, m in enumerate(modalities):
        if n[k] == 0:
            log.warning("modality %d has no valid training cells; identity scaling", m)
            continue
        mu = s[k] / n[k]
        var = max(ss[k] / n[k] - mu * mu, 0.0)
        if var <= 1e-24 * max(1.0, mu * mu):
            log.warning("modality %d has zero variance; identity scaling", m)
            continue
        mean[k] = mu
        sd[k] = np.sqrt(var)
    return Normalizer(tuple(modalities), mean, sd)


def normalize_for_training(train_cubes, *other_splits):
    """Fit on ``train_cubes`` and apply the same transforms to every split.

    Returns the normaliser followed by one list of normalised value arrays
    per split (training split first).
    """
    train_cubes = list(train_cubes)
    norm = fit_normalizer(train_cubes)
    out = [[norm.apply(c) for c in split] for split in (train_cubes, *other_splits)]
    return (norm, *out)


# --- dataset index ---------------------------------------------------------


@dataclass
class IndexEntry:
    path: Path
    id: str
    label: str
    missing_fraction: float
    kept: bool

    @property
    def y(self):
        return 1 if self.label == "HAB" else 0


INDEX_NAME = "index.json"


def write_index(entries, directory, extra=None):
    directory = Path(directory)
    doc = {
        "version": 1,
        "cubes": [
            {
                "path": Path(e.path).name if Path(e.path).parent == directory else str(e.path),
                "id": e.id,
                "label": e.label,
                "missing_fraction": e.missing_fraction,
                "kept": e.kept,
            }
            for e in entries
        ],
    }
    if extra:
        doc.update(extra)
    out = directory / INDEX_NAME
    out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_index(directory, kept_only=True):
    directory = Path(directory)
    path = directory / INDEX_NAME if directory.is_dir() else directory
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read cube index {path}: {exc}") from exc
    base = path.parent
    out = []
    for d in doc["cubes"]:
        e = IndexEntry(base / d["path"], d["id"], d["label"], float(d["missing_fraction"]), bool(d["kept"]))
        if e.kept or not kept_only:
            out.append(e)
    return out
