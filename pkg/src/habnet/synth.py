"""Synthetic labelled datacubes with a drifting bloom, clouds and noise.

Every field is an analytic function of grid-local metres, so the same event
can be rendered directly on the grid nodes or sampled at scattered swath
positions and pushed through the resampling pipeline.

Clouds: on each day ``K ~ Binomial(cloud_levels, cloud_fraction)`` and the
``K / cloud_levels`` share of the grid where a random-disk field is highest
is clouded. The same cloud mask applies to every reflectance-dependent
modality on that day; bathymetry, PAR and the bimonthly layer are
cloud-free.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from . import modalities as mods
from .cmr import SwathScene
from .datacube import (
    Datacube,
    IndexEntry,
    assemble_datacube,
    coverage,
    cube_days,
    derive_anomaly,
    sparsity_filter,
    write_cube,
    write_index,
)
from .gridding import GridSpec
from .groundtruth import HAB, NOHAB, EventRecord

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    n_per_class: int = 50
    amplitude: float = 0.75  # mg/m3 added to Chl-a at the bloom centre on the event day
    radius_km: float = 10.0  # Gaussian sigma of the bloom
    drift_km_per_day: float = 1.0
    growth: float = 0.5  # bloom amplitude on day 1 relative to the event day
    noise_sd: float = 0.15
    cloud_fraction: float = 0.3
    cloud_levels: int = 10
    cloud_disks: int = 40
    chl_median: float = 2.0
    chl_sigma_log: float = 0.6
    chl_spatial_sd: float = 0.3  # log-space SD of the smooth background texture
    length_scale_km: float = 30.0
    sst_bloom: float = 0.3  # degC warming at the bloom centre
    par_bloom: float = -1.0  # PAR change at the bloom centre
    n_days: int = 10
    width: int = 100
    height: int = 100
    cell_size: float = 1000.0
    modalities: tuple = mods.ALL
    mode: str = "raster"  # or "swath"
    swath_spacing_km: float = 1.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.cloud_fraction < 1.0:
            raise ValueError("cloud_fraction must be in [0, 1)")
        if self.radius_km <= 0:
            raise ValueError("radius_km must be > 0")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.mode not in ("raster", "swath"):
            raise ValueError("mode must be 'raster' or 'swath'")
        object.__setattr__(self, "modalities", tuple(self.modalities))

    @property
    def n_events(self):
        return 2 * self.n_per_class

    def to_dict(self):
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def label_of(index):
    """Events alternate HAB, NoHAB, HAB, ..."""
    return HAB if index % 2 == 0 else NOHAB


class SmoothField:
    """Random Fourier features: a stationary, roughly unit-variance field."""

    def __init__(self, rng, length_m, n_terms=32):
        self.w = rng.normal(0.0, 1.0 / length_m, size=(n_terms, 2))
        self.phase = rng.uniform(0.0, 2 * np.pi, size=n_terms)
        self.scale = np.sqrt(2.0 / n_terms)

    def __call__(self, x, y):
        arg = np.multiply.outer(x, self.w[:, 0]) + np.multiply.outer(y, self.w[:, 1]) + self.phase
        return self.scale * np.cos(arg).sum(axis=-1)

    def grid(self, xs, ys):
        """Values on the tensor grid ``ys x xs`` (rows follow ``ys``)."""
        a = np.multiply.outer(xs, self.w[:, 0]) + self.phase  # (W, K)
        b = np.multiply.outer(ys, self.w[:, 1])  # (H, K)
        return self.scale * (np.cos(b) @ np.cos(a).T - np.sin(b) @ np.sin(a).T)


class CloudField:
    """Union-of-disks cover with a smooth tie-breaker; higher = cloudier."""

    def __init__(self, rng, n_disks, half_extent_m, length_m):
        self.c = rng.uniform(-half_extent_m, half_extent_m, size=(n_disks, 2))
        self.r = rng.uniform(0.05, 0.2, size=n_disks) * 2 * half_extent_m
        self.tiebreak = SmoothField(rng, length_m / 3.0, 16)

    def __call__(self, x, y):
        d2 = (np.subtract.outer(x, self.c[:, 0]) ** 2 + np.subtract.outer(y, self.c[:, 1]) ** 2)
        return (d2 <= self.r**2).sum(axis=-1) + 0.01 * self.tiebreak(x, y)

    def grid(self, xs, ys):
        dx2 = np.subtract.outer(self.c[:, 0], xs) ** 2  # (D, W)
        dy2 = np.subtract.outer(self.c[:, 1], ys) ** 2  # (D, H)
        inside = dy2[:, :, None] + dx2[:, None, :] <= (self.r**2)[:, None, None]
        return inside.sum(axis=0) + 0.01 * self.tiebreak.grid(xs, ys)


@dataclass
class EventFields:
    """Everything random about one event, drawn independently of its label."""

    record: EventRecord
    level: float
    bathy: SmoothField
    texture: SmoothField
    sst_field: SmoothField
    par_field: SmoothField
    day_gain: np.ndarray  # (T,) multiplicative daily Chl-a variation
    clouds: list  # per day CloudField
    cloud_k: np.ndarray  # (T,) clouded levels out of cloud_levels
    direction: float
    noise_rng: np.random.Generator
    label: str
    index: int

    @property
    def hab(self):
        return self.label == HAB


def _event_record(rng, index, label):
    lat = float(rng.uniform(25.5, 28.5))
    lon = float(rng.uniform(-83.5, -81.8))
    day = date(2003, 1, 1) + timedelta(days=int(rng.integers(90, 5600)))
    conc = float(rng.uniform(1.0e5, 1.0e6)) if label == HAB else 0.0
    return EventRecord(f"synth-{index:05d}", lat, lon, day, "Karenia brevis", conc, label)


def draw_fields(config, index):
    ss = np.random.SeedSequence([config.seed, index])
    geo, bg, cl, nz = (np.random.default_rng(s) for s in ss.spawn(4))
    label = label_of(index)
    ell = config.length_scale_km * 1000.0
    half = max(config.width, config.height) * config.cell_size / 2.0
    T = config.n_days
    return EventFields(
        record=_event_record(geo, index, label),
        level=float(config.chl_median * np.exp(config.chl_sigma_log * bg.standard_normal())),
        bathy=SmoothField(bg, ell * 2),
        texture=SmoothField(bg, ell),
        sst_field=SmoothField(bg, ell * 2),
        par_field=SmoothField(bg, ell * 3),
        day_gain=np.exp(0.05 * bg.standard_normal(T)),
        clouds=[CloudField(cl, config.cloud_disks, half, ell) for _ in range(T)],
        cloud_k=cl.binomial(config.cloud_levels, config.cloud_fraction, size=T),
        direction=float(geo.uniform(0.0, 2 * np.pi)),
        noise_rng=nz,
        label=label,
        index=index,
    )


def bloom_shape(config, f, t, x, y):
    """Bloom weight in [0, 1] at day index ``t`` (0-based); zero for NoHAB."""
    if not f.hab:
        return np.zeros(np.shape(x))
    T = config.n_days
    lag = T - 1 - t
    off = config.drift_km_per_day * 1000.0 * lag
    cx, cy = off * np.cos(f.direction), off * np.sin(f.direction)
    grow = config.growth + (1.0 - config.growth) * (t / (T - 1) if T > 1 else 1.0)
    s = config.radius_km * 1000.0
    return grow * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))


def _smooth(field, x, y, axes):
    return field(x, y) if axes is None else field.grid(*axes)


def background_chl(config, f, x, y, axes=None):
    return f.level * np.exp(config.chl_spatial_sd * _smooth(f.texture, x, y, axes))


def base_fields(config, f, x, y, axes=None):
    """Label-free, day-independent layers; ``axes`` enables the grid fast path."""
    return {
        "chl": background_chl(config, f, x, y, axes),
        "par": 45.0 + 3.0 * _smooth(f.par_field, x, y, axes),
        "sst": 26.0 + 1.0 * _smooth(f.sst_field, x, y, axes),
        "bathy": -30.0 + 15.0 * _smooth(f.bathy, x, y, axes),
    }


def _rrs(chl, rng, noise):
    """Toy band reflectances (sr^-1) falling or rising smoothly with Chl-a."""
    c = np.maximum(chl, 1e-3)
    mult = lambda: np.exp(noise * rng.standard_normal(np.shape(c)))
    return {
        4: 0.0070 * c**-0.45 * mult(),
        5: 0.0060 * c**-0.35 * mult(),
        6: 0.0050 * c**-0.20 * mult(),
        7: 0.0040 * c**-0.05 * mult(),
        8: 0.0035 * c**0.05 * mult(),
    }


def field_values(config, f, t, x, y, base):
    """Noisy values of every sensed modality at day index ``t``."""
    rng = f.noise_rng
    sd = config.noise_sd
    shape = np.shape(x)
    b = bloom_shape(config, f, t, x, y)
    chl = base["chl"] * f.day_gain[t] + config.amplitude * b
    out = {
        mods.CHLA: chl + sd * rng.standard_normal(shape),
        mods.CHLA_TERRA: chl + sd * rng.standard_normal(shape),
        mods.PAR: base["par"] + config.par_bloom * b + 0.2 * rng.standard_normal(shape),
        mods.SST: base["sst"] + config.sst_bloom * b + 0.1 * rng.standard_normal(shape),
    }
    out.update(_rrs(chl, rng, 0.05))
    return out


def static_values(base):
    return {mods.BATHYMETRY: base["bathy"], mods.CHLA_BIMONTHLY: base["chl"]}


def cloud_threshold(config, f, t, axes):
    """Cloud-field level above which a point is clouded, or None for a clear day.

    Set on the grid nodes so that exactly ``K * H * W // cloud_levels`` nodes
    are clouded.
    """
    k = int(f.cloud_k[t])
    if k == 0:
        return None
    node_vals = np.sort(f.clouds[t].grid(*axes).ravel())[::-1]
    n_cloud = (k * node_vals.size) // config.cloud_levels
    if n_cloud == 0:
        return None
    if n_cloud >= node_vals.size:
        return -np.inf
    return 0.5 * (node_vals[n_cloud - 1] + node_vals[n_cloud])


def cloud_mask(config, f, t, x, y, axes):
    """True where the sky is clear at points ``(x, y)``."""
    thr = cloud_threshold(config, f, t, axes)
    if thr is None:
        return np.ones(np.shape(x), dtype=bool)
    return f.clouds[t](x, y) < thr


def _grid_cloud_mask(config, f, t, axes):
    thr = cloud_threshold(config, f, t, axes)
    if thr is None:
        return np.ones((len(axes[1]), len(axes[0])), dtype=bool)
    return f.clouds[t].grid(*axes) < thr


@dataclass
class SynthEvent:
    cube: Datacube
    record: EventRecord
    truth: dict = field(default_factory=dict)


def _render_raster(config, f, spec):
    gx, gy = spec.nodes()
    mlist = config.modalities
    T = config.n_days
    vals = np.zeros((len(mlist), T) + spec.shape, dtype=np.float32)
    mask = np.zeros(vals.shape, dtype=bool)
    axes = spec.axes()
    base = base_fields(config, f, gx, gy, axes)
    static = static_values(base)
    for t in range(T):
        clear = _grid_cloud_mask(config, f, t, axes)
        sensed = field_values(config, f, t, gx, gy, base)
        for j, m in enumerate(mlist):
            if m == mods.CHLA_ANOMALY:
                continue
            v = static[m] if m in static else sensed[m]
            ok = clear if mods.BY_INDEX[m].reflectance_dependent else np.ones(spec.shape, dtype=bool)
            vals[j, t] = np.where(ok, v, 0.0)
            mask[j, t] = ok
    if mods.CHLA_ANOMALY in mlist:
        derive_anomaly(vals, mask, mlist)
    days = cube_days(f.record.date, T)
    cube = Datacube(f.record, spec, tuple(mlist), days, vals, mask)
    cube.coverage = coverage(cube)
    return cube


def swath_scenes(config, f, spec):
    """Scattered samples for every (modality, day), as swath scenes."""
    rng = np.random.default_rng([config.seed, f.index, 1])
    step = config.swath_spacing_km * 1000.0
    half = (max(spec.width, spec.height) / 2 + 3) * spec.cell_size
    g = np.arange(-half, half + step, step)
    px, py = np.meshgrid(g, g)
    axes = spec.axes()
    tm = spec.projection()
    days = cube_days(f.record.date, config.n_days)
    scenes = {}

    def jittered():
        return (px + rng.uniform(-0.3, 0.3, px.shape) * step).ravel(), (py + rng.uniform(-0.3, 0.3, py.shape) * step).ravel()

    x, y = jittered()
    lat, lon = tm.inverse(x, y)
    for m, v in static_values(base_fields(config, f, x, y)).items():
        if m not in config.modalities:
            continue
        # bathymetry is read once; the bimonthly product is issued every day
        for d in days[:1] if m == mods.BATHYMETRY else days:
            scenes[(m, d)] = SwathScene(m, d, lat, lon, v)
    for t, d in enumerate(days):
        x, y = jittered()
        lat, lon = tm.inverse(x, y)
        clear = cloud_mask(config, f, t, x, y, axes)
        for m, v in field_values(config, f, t, x, y, base_fields(config, f, x, y)).items():
            if m not in config.modalities:
                continue
            keep = clear if mods.BY_INDEX[m].reflectance_dependent else np.ones(len(x), dtype=bool)
            scenes[(m, d)] = SwathScene(m, d, lat[keep], lon[keep], v[keep], n_missing=int(np.sum(~keep)))
    return scenes


def generate_event(config, index):
    """Render event ``index``; its label alternates starting with HAB."""
    f = draw_fields(config, index)
    spec = GridSpec(f.record.lat, f.record.lon, config.cell_size, config.width, config.height)
    if config.mode == "raster":
        cube = _render_raster(config, f, spec)
    else:
        cube = assemble_datacube(f.record, swath_scenes(config, f, spec), spec,
                                 modalities=config.modalities, n_days=config.n_days)
    truth = {
        "chl_background": background_chl(config, f, None, None, spec.axes()),
        "day_gain": f.day_gain,
        "cloud_k": f.cloud_k,
        "level": f.level,
        "direction": f.direction,
    }
    return SynthEvent(cube, f.record, truth)


def iter_events(config, indices=None, jobs=1):
    idx = range(config.n_events) if indices is None else indices
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            yield from ex.map(lambda i: generate_event(config, i), idx)
    else:
        for i in idx:
            yield generate_event(config, i)


def generate_dataset(config, out_dir, jobs=1, max_missing_fraction=0.5):
    """Write one ``.habc`` per event plus ``index.json``; returns the index entries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for ev in iter_events(config, jobs=jobs):
        path = out / f"{ev.record.id}.habc"
        write_cube(ev.cube, path)
        dec = sparsity_filter(ev.cube, max_missing_fraction)
        entries.append(IndexEntry(path, ev.record.id, ev.record.label, dec.missing_fraction, dec.keep))
    write_index(entries, out, extra={"synth_config": config.to_dict()})
    return entries
