"""``habnet`` command line.

Exit codes: 0 success, 1 usage error, 2 data/format/network error,
3 numerical failure. Every run writes a manifest next to its output with
the resolved settings, their fingerprint, input hashes and the tool
version; manifests carry no timestamps, so identical runs give identical
manifests.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from . import __version__
from . import baselines as B
from . import cmr
from . import datacube as D
from . import encoder as E
from . import evaluation as V
from . import groundtruth as G
from . import heads as H
from . import modalities as mods
from . import synth
from .errors import DataError, HabnetError, NumericalError

log = logging.getLogger("habnet")

CACHE_ENV = "HABNET_CACHE_DIR"

RULE_ALIASES = {
    "ss488": "SS(488)<0.0",
    "bp1": "Bp_ratio<1.0",
    "bp2": "Bp_ratio<2.0",
    "anom1": "Chla_Anom>1.0",
    "anom10": "Chla_Anom>10.0",
    "anom100": "Chla_Anom>100.0",
}

DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "offline": False,
    # ingest-groundtruth
    "threshold": G.DEFAULT_THRESHOLD,
    "species": G.DEFAULT_SPECIES,
    "exclusive": False,
    # search-granules / build-cubes
    "products": ["MODISA_L2_OC", "MODISA_L2_SST", "MODIST_L2_OC"],
    "days": 10,
    "end_offset": 0,
    "halfwidth_km": 50.0,
    "cell_size": 1000.0,
    "size": 100,
    "alpha_radius": 2000.0,
    "max_missing": 0.5,
    "bimonthly_window": 60,
    # encoder / heads / evaluation
    "modalities": "3,12",
    "encoder": "small_cnn",
    "channels": 16,
    "encoder_seed": 0,
    "heads": "mlp0",
    "folds": 5,
    "inner_fraction": 0.8,
    "windows": "All",
    "pred_semantics": "oldest",
    "lr": None,
    "epochs": None,
    "patience": None,
    "batch_size": None,
    # synth
    "events": 50,
    "amplitude": 0.75,
    "noise": 0.15,
    "cloud_fraction": 0.3,
    "drift": 1.0,
    "synth_mode": "raster",
    "rule": "all",
    "n_estimators": 300,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --- configuration ---------------------------------------------------------------

def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    try:
        if p.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            with open(p, "rb") as fh:
                return tomllib.load(fh)
        return json.loads(p.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read config {p}: {exc}") from exc


class Settings:
    """Flag > config file (command section, then top level) > default."""

    def __init__(self, args, config):
        self.args = args
        self.file = config
        self.section = config.get(args.command, {}) if isinstance(config.get(args.command), dict) else {}
        self.used = {}

    def __call__(self, key):
        v = getattr(self.args, key, None)
        if v is None:
            if key in self.section:
                v = self.section[key]
            elif key in self.file and not isinstance(self.file[key], dict):
                v = self.file[key]
            else:
                v = DEFAULTS.get(key)
        self.used[key] = v
        return v


# --- manifests ---------------------------------------------------------------------

def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def input_hashes(paths):
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file() and not f.name.endswith(".manifest.json"):
                    out[str(f.relative_to(p.parent))] = file_hash(f)
        elif p.is_file():
            out[p.name] = file_hash(p)
    return out


def write_manifest(out, command, settings, inputs=()):
    cfg = {k: settings.used[k] for k in sorted(settings.used)}
    doc = {
        "command": command,
        "settings": cfg,
        "config_fingerprint": V.fingerprint({"command": command, **cfg}),
        "seeds": {k: v for k, v in cfg.items() if "seed" in k},
        "inputs": input_hashes(inputs),
        "version": __version__,
    }
    out = Path(out)
    path = out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- shared helpers ----------------------------------------------------------------

def _split_list(text):
    if isinstance(text, (list, tuple)):
        return [str(t) for t in text]
    return [t.strip() for t in str(text).split(",") if t.strip()]


def load_cubes(directory, modalities=None):
    entries = D.read_index(directory)
    if not entries:
        raise DataError(f"{directory}: no kept cubes in the index")
    cubes = []
    for e in entries:
        c = D.read_cube(e.path)
        cubes.append(c.subset(modalities) if modalities else c)
    return cubes, np.array([e.y for e in entries])


def encoder_setup(s):
    kind = s("encoder")
    # crop_raw keeps one value per cell, so it always has a single channel
    channels = 1 if kind == "crop_raw" else int(s("channels"))
    spec = E.EncoderSpec(kind=kind, channels=channels)
    params = E.init_cnn(spec, np.random.default_rng(int(s("encoder_seed")))) if kind == "small_cnn" else None
    return spec, params


def head_specs(s):
    out = []
    for k in _split_list(s("heads")):
        spec = H.HeadSpec(k, seed=int(s("seed")))
        spec = H.with_overrides(
            spec,
            lr=s("lr"),
            max_epochs=None if s("epochs") is None else int(s("epochs")),
            patience=None if s("patience") is None else int(s("patience")),
            batch_size=None if s("batch_size") is None else int(s("batch_size")),
        )
        out.append(spec)
    return out


def _windows(s):
    return [V.WindowSpec.parse(w, s("pred_semantics")) for w in _split_list(s("windows"))]


# --- subcommands -------------------------------------------------------------------

def cmd_ingest_groundtruth(args, s):
    schema = G.ColumnSchema.from_json(args.schema) if args.schema else None
    parsed = G.parse_events(args.input, schema)
    res = G.label_events(parsed.rows, float(s("threshold")), s("species"), not s("exclusive"))
    G.write_events_json(res.records, args.out)
    if parsed.rejects:
        G.write_rejects(parsed.rejects, args.input)
    summary = {
        "events": len(res.records),
        "hab": sum(r.y for r in res.records),
        "nohab": sum(1 - r.y for r in res.records),
        "dropped": res.dropped,
        "rejected_rows": len(parsed.rejects),
    }
    print(json.dumps(summary, sort_keys=True))
    write_manifest(args.out, args.command, s, [args.input, args.schema])


def _ref_to_dict(r):
    return {
        "granule_name": r.granule_name,
        "modality_source": r.modality_source,
        "start_time": r.start_time.isoformat(),
        "end_time": r.end_time.isoformat(),
        "download_url": r.download_url,
        "size_bytes": r.size_bytes,
        "checksum": r.checksum,
    }


def _ref_from_dict(d):
    return cmr.GranuleRef(
        d["granule_name"], d["modality_source"],
        datetime.fromisoformat(d["start_time"]), datetime.fromisoformat(d["end_time"]),
        d["download_url"], d.get("size_bytes"), d.get("checksum"),
    )


def cmd_search_granules(args, s):
    events = G.read_events_json(args.events)
    offline = args.offline
    out = {}
    for ev in events:
        last = ev.date - timedelta(days=int(s("end_offset")))
        window = cmr.event_window(last, int(s("days")))
        refs = []
        for product in _split_list(s("products")):
            for q in cmr.build_search_query(product, ev.lat, ev.lon, window, float(s("halfwidth_km"))):
                refs.extend(cmr.search_granules(q, offline=offline))
        out[ev.id] = [_ref_to_dict(r) for r in refs]
    _write_json(args.out, out)
    write_manifest(args.out, args.command, s, [args.events])


def cmd_fetch(args, s):
    doc = json.loads(Path(args.granules).read_text(encoding="utf-8"))
    dest = args.dest or os.environ.get(CACHE_ENV)
    if not dest:
        raise UsageError(f"fetch needs --dest or {CACHE_ENV}")
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    refs = {}
    for items in doc.values():
        for d in items:
            refs[d["granule_name"]] = _ref_from_dict(d)
    paths = cmr.fetch_all([refs[k] for k in sorted(refs)], dest, jobs=int(s("jobs")), offline=args.offline)
    print(json.dumps({"fetched": len(paths)}))
    write_manifest(dest, args.command, s, [args.granules])


def cmd_build_cubes(args, s):
    events = G.read_events_json(args.events)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wanted = mods.parse_modality_list(args.modalities or "all")
    entries = []
    for ev in events:
        scenes = {}
        ev_dir = Path(args.swaths) / ev.id
        for f in sorted(ev_dir.glob("*.swath")) if ev_dir.is_dir() else []:
            sc = cmr.read_swath_file(f)
            scenes.setdefault((sc.modality, sc.day), []).append(sc)
        size = int(s("size"))
        spec = D.GridSpec(ev.lat, ev.lon, float(s("cell_size")), size, size)
        cube = D.assemble_datacube(
            ev, scenes, spec, float(s("alpha_radius")), wanted, int(s("days")), int(s("end_offset")),
            int(s("bimonthly_window")),
        )
        path = out / f"{ev.id}.habc"
        D.write_cube(cube, path)
        dec = D.sparsity_filter(cube, float(s("max_missing")))
        entries.append(D.IndexEntry(path, ev.id, ev.label, dec.missing_fraction, dec.keep))
        if args.debug_rasters:
            from .gridding import RasterLayer, write_debug_rasters

            k = cube.m(mods.CHLA) if mods.CHLA in cube.modalities else 0
            lay = RasterLayer(cube.values[k, -1], cube.mask[k, -1])
            write_debug_rasters(lay, out / f"{ev.id}.m{cube.modalities[k]}")
    D.write_index(entries, out)
    print(json.dumps({"cubes": len(entries), "kept": sum(e.kept for e in entries)}))
    write_manifest(out, args.command, s, [args.events, args.swaths])


def cmd_synth_gen(args, s):
    base = synth.SynthConfig.from_json(args.synth_config) if args.synth_config else synth.SynthConfig()
    cfg = replace(
        base,
        n_per_class=int(s("events")),
        seed=int(s("seed")),
        amplitude=float(s("amplitude")),
        noise_sd=float(s("noise")),
        cloud_fraction=float(s("cloud_fraction")),
        drift_km_per_day=float(s("drift")),
        mode=s("synth_mode"),
        modalities=mods.parse_modality_list(args.modalities) if args.modalities else base.modalities,
    )
    entries = synth.generate_dataset(cfg, args.out, jobs=int(s("jobs")), max_missing_fraction=float(s("max_missing")))
    print(json.dumps({"cubes": len(entries), "kept": sum(e.kept for e in entries)}))
    write_manifest(args.out, args.command, s, [args.synth_config])


def _selected(s):
    return mods.parse_modality_list(s("modalities"))


def cmd_evaluate(args, s):
    sel = _selected(s)
    cubes, y = load_cubes(args.cubes, sel)
    enc_spec, enc_params = encoder_setup(s)
    specs = head_specs(s)
    windows = _windows(s)
    plan = V.make_fold_plan(y, int(s("folds")), float(s("inner_fraction")), int(s("seed")))
    feats = V.CubeFeatures(cubes, sel, enc_spec, enc_params)
    config = {"encoder": enc_spec.to_dict(), "encoder_seed": s("encoder_seed"), "modalities": list(sel)}
    reports = V.run_nested_cv(feats, y, specs, plan, windows, config, jobs=int(s("jobs")))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(V.reports_json(reports), encoding="utf-8")
    out.with_suffix(".txt").write_text(V.reports_table(reports), encoding="utf-8")
    sys.stdout.write(V.reports_table(reports))
    write_manifest(out, args.command, s, [Path(args.cubes) / D.INDEX_NAME])


def cmd_train(args, s):
    sel = _selected(s)
    cubes, y = load_cubes(args.cubes, sel)
    enc_spec, enc_params = encoder_setup(s)
    (spec,) = head_specs(s)[:1]
    window = _windows(s)[0]
    rng = np.random.default_rng(int(s("seed")))
    idx = np.arange(len(y))
    val = np.zeros(len(y), dtype=bool)
    for c in (0, 1):
        members = rng.permutation(idx[y == c])
        val[members[int(round(float(s("inner_fraction")) * len(members))) :]] = True
    tr = idx[~val]
    norm = D.fit_normalizer((cubes[i] for i in tr), sel)
    X, _ = E.encode_cubes(cubes, sel, enc_spec, enc_params, norm, np.float32)
    X = window.select(X)
    head = H.train_head(spec, X[tr], y[tr], X[val], y[val])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    H.save_head(head, out / "head.habh")
    np.savez(out / "encoder.npz", **E.encoder_to_dict(enc_spec, enc_params))
    bundle = {
        "encoder": enc_spec.to_dict(),
        "normalizer": norm.to_dict(),
        "modalities": list(sel),
        "window": window.tag,
        "pred_semantics": window.pred_semantics,
        "version": __version__,
    }
    _write_json(out / "bundle.json", bundle)
    write_manifest(out, args.command, s, [Path(args.cubes) / D.INDEX_NAME])


def load_bundle(path):
    path = Path(path)
    meta = json.loads((path / "bundle.json").read_text(encoding="utf-8"))
    spec = E.EncoderSpec.from_dict(meta["encoder"])
    params = None
    if spec.kind == "small_cnn":
        with np.load(path / "encoder.npz") as z:
            params = E.encoder_from_arrays(spec, dict(z))
    norm = D.Normalizer.from_dict(meta["normalizer"])
    window = V.WindowSpec.parse(meta["window"], meta.get("pred_semantics", "oldest"))
    return spec, params, norm, tuple(meta["modalities"]), window, H.load_head(path / "head.habh")


def cmd_forecast(args, s):
    enc_spec, enc_params, norm, sel, window, head = load_bundle(args.bundle)
    entries = D.read_index(args.cubes, kept_only=False)
    cubes = [D.read_cube(e.path).subset(sel) for e in entries]
    X, _ = E.encode_cubes(cubes, sel, enc_spec, enc_params, norm, np.float32)
    prob, label = H.predict(head, window.select(X))
    preds = [
        {"id": c.event.id, "probability": float(p), "label": G.HAB if k else G.NOHAB, "kept": e.kept}
        for c, p, k, e in zip(cubes, prob, label, entries)
    ]
    _write_json(args.out, {"window": window.tag, "horizon_days": window.horizon(X.shape[1]), "predictions": preds})
    write_manifest(args.out, args.command, s, [args.bundle, Path(args.cubes) / D.INDEX_NAME])


def cmd_importance(args, s):
    sel = _selected(s)
    cubes, y = load_cubes(args.cubes, sel)
    enc_spec, enc_params = encoder_setup(s)
    norm = D.fit_normalizer(cubes, sel)
    X, imap = E.encode_cubes(cubes, sel, enc_spec, enc_params, norm, np.float32)
    imp = V.feature_importance(X.reshape(len(X), -1), y, imap, int(s("seed")), int(s("n_estimators")))
    doc = {
        "modalities": list(sel),
        "days": list(range(1, imap.n_days + 1)),
        "matrix": imp.matrix.tolist(),
        "ranking": [{"modality": m, "day": d} for m, d in imp.ranking()],
    }
    _write_json(args.out, doc)
    write_manifest(args.out, args.command, s, [Path(args.cubes) / D.INDEX_NAME])


def cmd_baseline(args, s):
    cubes, y = load_cubes(args.cubes)
    rule = s("rule")
    names = [r.name for r in B.RULES] if rule == "all" else [RULE_ALIASES.get(r, r) for r in _split_list(rule)]
    for n in names:
        if n not in B.RULES_BY_NAME:
            raise UsageError(f"unknown rule {n!r}; choose from {', '.join(RULE_ALIASES)}")
    readings = [B.event_reading(c) for c in cubes]
    entries = V.baseline_report(readings, y, names)
    doc = {
        "aggregation": readings[0].source if readings else None,
        "available_rules": [r.name for r in B.RULES],
        "rules": entries,
    }
    _write_json(args.out, doc)
    Path(args.out).with_suffix(".txt").write_text(V.baseline_table(entries), encoding="utf-8")
    sys.stdout.write(V.baseline_table(entries))
    write_manifest(args.out, args.command, s, [Path(args.cubes) / D.INDEX_NAME])


def cmd_report(args, s):
    parts = []
    for p in args.inputs:
        doc = json.loads(Path(p).read_text(encoding="utf-8"))
        if isinstance(doc, dict) and "rules" in doc:
            parts.append(V.baseline_table(doc["rules"]))
        elif isinstance(doc, list):
            reps = [V.EvalReport(d["head"], d["window"], d["days"], d["horizon_days"], d["folds"],
                                 d["config_fingerprint"]) for d in doc]
            parts.append(V.reports_table(reps))
        else:
            raise DataError(f"{p}: not an evaluation or baseline report")
    text = "\n".join(parts)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        write_manifest(args.out, args.command, s, args.inputs)
    sys.stdout.write(text)


# --- parser ----------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="habnet", description="Harmful algal bloom datacube pipeline.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="JSON or TOML settings file (flags override it)")
    p.add_argument("--jobs", type=int, help="parallel fold/fetch/generation jobs")
    p.add_argument("--offline", action="store_true", default=None, help="forbid all network access")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    a = sub.add_parser("ingest-groundtruth", help="label cell-count records")
    a.add_argument("--input", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--schema", help="JSON column mapping")
    a.add_argument("--threshold", type=float, help="HAB threshold, cells/L")
    a.add_argument("--species")
    a.add_argument("--exclusive", action="store_true", default=None, help="HAB needs count > threshold")

    a = sub.add_parser("search-granules", help="query the granule catalogue for each event")
    a.add_argument("--events", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--products", help="comma-separated product short names")
    a.add_argument("--days", type=int)
    a.add_argument("--end-offset", dest="end_offset", type=int)
    a.add_argument("--halfwidth-km", dest="halfwidth_km", type=float)

    a = sub.add_parser("fetch", help="download granules listed by search-granules")
    a.add_argument("--granules", required=True)
    a.add_argument("--dest", help=f"download directory (default ${CACHE_ENV})")

    a = sub.add_parser("build-cubes", help="resample swath files into datacubes")
    a.add_argument("--events", required=True)
    a.add_argument("--swaths", required=True, help="directory with one subdirectory of .swath files per event id")
    a.add_argument("--out", required=True)
    a.add_argument("--modalities")
    a.add_argument("--days", type=int)
    a.add_argument("--end-offset", dest="end_offset", type=int)
    a.add_argument("--cell-size", dest="cell_size", type=float)
    a.add_argument("--size", type=int)
    a.add_argument("--alpha-radius", dest="alpha_radius", type=float)
    a.add_argument("--max-missing", dest="max_missing", type=float)
    a.add_argument("--bimonthly-window", dest="bimonthly_window", type=int)
    a.add_argument("--debug-rasters", dest="debug_rasters", action="store_true", help="also write PGM/PBM rasters of the event-day Chl-a")

    a = sub.add_parser("synth-gen", help="generate a synthetic labelled dataset")
    a.add_argument("--out", required=True)
    a.add_argument("--events", type=int, help="events per class")
    a.add_argument("--amplitude", type=float)
    a.add_argument("--noise", type=float)
    a.add_argument("--cloud-fraction", dest="cloud_fraction", type=float)
    a.add_argument("--drift", type=float, help="bloom drift, km/day")
    a.add_argument("--mode", dest="synth_mode", choices=("raster", "swath"))
    a.add_argument("--modalities")
    a.add_argument("--max-missing", dest="max_missing", type=float)
    a.add_argument("--synth-config", dest="synth_config", help="JSON synthetic-data settings")

    def model_flags(a):
        a.add_argument("--cubes", required=True)
        a.add_argument("--modalities")
        a.add_argument("--encoder", choices=("small_cnn", "crop_raw"))
        a.add_argument("--channels", type=int)
        a.add_argument("--encoder-seed", dest="encoder_seed", type=int)
        a.add_argument("--window", dest="windows", help="All, pred_k or short_k (comma-separated for evaluate)")
        a.add_argument("--pred-semantics", dest="pred_semantics", choices=("oldest", "horizon"))
        a.add_argument("--lr", type=float)
        a.add_argument("--epochs", type=int)
        a.add_argument("--patience", type=int)
        a.add_argument("--batch-size", dest="batch_size", type=int)
        a.add_argument("--inner-fraction", dest="inner_fraction", type=float)

    a = sub.add_parser("train", help="fit one head and save a forecast bundle")
    model_flags(a)
    a.add_argument("--head", dest="heads")
    a.add_argument("--out", required=True)

    a = sub.add_parser("evaluate", help="nested cross-validation")
    model_flags(a)
    a.add_argument("--head", dest="heads", help="comma-separated head kinds")
    a.add_argument("--folds", type=int)
    a.add_argument("--out", required=True)

    a = sub.add_parser("forecast", help="apply a trained bundle to cubes")
    a.add_argument("--bundle", required=True)
    a.add_argument("--cubes", required=True)
    a.add_argument("--out", required=True)

    a = sub.add_parser("importance", help="per-(modality, day) feature importance")
    a.add_argument("--cubes", required=True)
    a.add_argument("--modalities")
    a.add_argument("--encoder", choices=("small_cnn", "crop_raw"))
    a.add_argument("--channels", type=int)
    a.add_argument("--encoder-seed", dest="encoder_seed", type=int)
    a.add_argument("--n-estimators", dest="n_estimators", type=int)
    a.add_argument("--out", required=True)

    a = sub.add_parser("baseline", help="threshold rules on per-event readings")
    a.add_argument("--cubes", required=True)
    a.add_argument("--rule", help=f"all, or comma-separated of {', '.join(RULE_ALIASES)}")
    a.add_argument("--out", required=True)

    a = sub.add_parser("report", help="render JSON reports as text tables")
    a.add_argument("inputs", nargs="+")
    a.add_argument("--out")
    return p


COMMANDS = {
    "ingest-groundtruth": cmd_ingest_groundtruth,
    "search-granules": cmd_search_granules,
    "fetch": cmd_fetch,
    "build-cubes": cmd_build_cubes,
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
    "importance": cmd_importance,
    "baseline": cmd_baseline,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        s = Settings(args, load_config(args.config))
        args.offline = bool(s("offline"))
        if args.offline:
            os.environ[cmr.OFFLINE_ENV] = "1"
        s("seed")
        COMMANDS[args.command](args, s)
    except (UsageError, ValueError) as exc:
        print(f"habnet: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"habnet: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (HabnetError, OSError) as exc:
        print(f"habnet: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
