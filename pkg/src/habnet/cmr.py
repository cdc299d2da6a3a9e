"""Granule discovery and retrieval, plus the portable swath file format.

Search goes through a CMR-style ``granules.json`` endpoint. Level-2 granules
are fetched as opaque files; converting them to swath files (one modality,
one day, scattered ``lat,lon,value`` samples) happens outside this package.

Swath file layout::

    HABSWATH 1
    {"modality": 3, "day": "2018-01-05", "granule": "..."}
    27.01,-82.43,1.25
    ...
"""

import json
import logging
import math
import os
import tempfile
import time
import urllib.error
import urllib.parse
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from . import modalities
from .errors import FetchError, FormatError, OfflineError
from .projection import WGS84_A, WGS84_E2

log = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "https://cmr.earthdata.nasa.gov"
ENDPOINT_ENV = "HABNET_CMR_URL"
OFFLINE_ENV = "HABNET_OFFLINE"
SEARCH_PATH = "/search/granules.json"

SWATH_MAGIC = "HABSWATH 1"

RETRY_DELAYS = (1.0, 4.0, 16.0)


def endpoint():
    return os.environ.get(ENDPOINT_ENV, DEFAULT_ENDPOINT).rstrip("/")


def offline_requested(offline=False):
    return offline or os.environ.get(OFFLINE_ENV, "") not in ("", "0")


def _check_online(offline):
    if offline_requested(offline):
        raise OfflineError("network access requested in offline mode")


@dataclass(frozen=True)
class GranuleRef:
    granule_name: str
    modality_source: str
    start_time: datetime
    end_time: datetime
    download_url: str
    size_bytes: int | None = None
    checksum: str | None = None  # "<algorithm>:<hex digest>"

    def __post_init__(self):
        if not self.granule_name:
            raise ValueError("granule_name must be non-empty")
        if self.start_time > self.end_time:
            raise ValueError("start_time after end_time")


@dataclass
class SwathScene:
    modality: int
    day: date
    lats: np.ndarray
    lons: np.ndarray
    values: np.ndarray
    granule: str | None = None
    n_missing: int = 0
    n_rejected: int = 0

    def __len__(self):
        return len(self.values)

    @property
    def samples(self):
        return np.column_stack([self.lats, self.lons, self.values])


@dataclass(frozen=True)
class SearchQuery:
    path: str
    params: tuple

    def url(self, base=None):
        return (base or endpoint()) + self.path + "?" + urllib.parse.urlencode(self.params)


def event_window(event_date, days=10):
    """Inclusive date window of ``days`` days ending on the event date."""
    return event_date - timedelta(days=days - 1), event_date


def km_to_degrees(lat, km):
    """Half-widths in degrees of latitude and longitude for ``km`` at ``lat``.

    Uses the ellipsoid's meridional and prime-vertical radii of curvature.
    """
    phi = math.radians(lat)
    w = 1.0 - WGS84_E2 * math.sin(phi) ** 2
    meridional = WGS84_A * (1.0 - WGS84_E2) / w**1.5
    prime_vertical = WGS84_A / math.sqrt(w)
    metres = km * 1000.0
    dlat = math.degrees(metres / meridional)
    coslat = math.cos(phi)
    dlon = 180.0 if coslat < 1e-12 else min(180.0, math.degrees(metres / (prime_vertical * coslat)))
    return dlat, dlon


def _rfc3339(day, end=False):
    t = datetime(day.year, day.month, day.day, tzinfo=timezone.utc)
    if end:
        t += timedelta(days=1, seconds=-1)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def build_search_query(product, lat, lon, date_window, bbox_halfwidth_km):
    """Granule search queries around an event.

    Returns a list with one query, or two when the box crosses the
    antimeridian. Parameter order is fixed.
    """
    start, end = date_window
    if start > end:
        raise ValueError("date window start after end")
    if bbox_halfwidth_km <= 0:
        raise ValueError("bbox_halfwidth_km must be > 0")
    dlat, dlon = km_to_degrees(lat, bbox_halfwidth_km)
    south = max(-90.0, lat - dlat)
    north = min(90.0, lat + dlat)
    west, east = lon - dlon, lon + dlon
    temporal = f"{_rfc3339(start)},{_rfc3339(end, end=True)}"
    if west < -180.0:
        boxes = [(west + 360.0, south, 180.0, north), (-180.0, south, east, north)]
    elif east > 180.0:
        boxes = [(west, south, 180.0, north), (-180.0, south, east - 360.0, north)]
    else:
        boxes = [(west, south, east, north)]
    out = []
    for box in boxes:
        bbox = ",".join(f"{v:.6f}" for v in box)
        params = (("short_name", product), ("temporal", temporal), ("bounding_box", bbox))
        out.append(SearchQuery(SEARCH_PATH, params))
    return out


class GranuleList(list):
    """A list of :class:`GranuleRef` that also records skipped entries."""

    skipped = 0


def _parse_time(text):
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    t = datetime.fromisoformat(text)
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t


def _data_link(entry):
    for link in entry.get("links", []):
        rel = link.get("rel", "")
        if rel.endswith("/data#") and not link.get("inherited", False) and link.get("href"):
            return link["href"]
    return None


def _checksum(entry):
    c = entry.get("checksum")
    if isinstance(c, dict) and c.get("value"):
        return f"{c.get('algorithm', 'md5').lower().replace('-', '')}:{c['value'].lower()}"
    if isinstance(c, str) and ":" in c:
        return c.lower()
    return None


def parse_granule_listing(body):
    """Parse a ``granules.json`` response body into granule references.

    Entries without a data link are skipped and counted in ``.skipped``.
    """
    if isinstance(body, bytes):
        body = body.decode("utf-8")
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as exc:
        raise FormatError(f"granule listing is not valid JSON at byte offset {exc.pos}: {exc.msg}") from exc
    entries = doc.get("feed", {}).get("entry", []) if isinstance(doc, dict) else None
    if entries is None:
        raise FormatError("granule listing has no feed.entry array")
    out = GranuleList()
    for e in entries:
        url = _data_link(e)
        name = e.get("producer_granule_id") or e.get("title")
        if not url or not name:
            out.skipped += 1
            continue
        size = e.get("size_bytes")
        out.append(
            GranuleRef(
                granule_name=name,
                modality_source=e.get("collection_short_name") or e.get("dataset_id", ""),
                start_time=_parse_time(e["time_start"]),
                end_time=_parse_time(e.get("time_end") or e["time_start"]),
                download_url=url,
                size_bytes=int(size) if size is not None else None,
                checksum=_checksum(e),
            )
        )
    if out.skipped:
        log.warning("skipped %d listing entries without a download link", out.skipped)
    return out


def search_granules(query, base_url=None, offline=False, timeout=60.0):
    _check_online(offline)
    with urllib.request.urlopen(query.url(base_url), timeout=timeout) as resp:
        return parse_granule_listing(resp.read())


def _complete(path, ref):
    if not path.is_file():
        return False
    return ref.size_bytes is None or path.stat().st_size == ref.size_bytes


def _verify(path, ref, declared_length):
    size = path.stat().st_size
    if declared_length is not None and size != declared_length:
        raise FetchError(f"{ref.granule_name}: got {size} bytes, server declared {declared_length}")
    if ref.size_bytes is not None and size != ref.size_bytes:
        raise FetchError(f"{ref.granule_name}: got {size} bytes, listing declared {ref.size_bytes}")
    if ref.checksum:
        import hashlib

        algo, want = ref.checksum.split(":", 1)
        h = hashlib.new(algo)
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        if h.hexdigest() != want:
            raise FetchError(f"{ref.granule_name}: {algo} checksum mismatch")


def fetch_granule(ref, dest, attempts=3, delays=RETRY_DELAYS, offline=False, timeout=120.0, sleep=time.sleep):
    """Download a granule into ``dest`` under its granule name.

    An existing complete file is returned without touching the network.
    Data is written to a temporary file and renamed into place, so a failed
    download never leaves a file at the final path.
    """
    dest = Path(dest)
    final = dest / ref.granule_name
    if _complete(final, ref):
        return final
    _check_online(offline)
    dest.mkdir(parents=True, exist_ok=True)
    last = None
    for attempt in range(attempts):
        if attempt:
            sleep(delays[min(attempt - 1, len(delays) - 1)])
        fd, tmp = tempfile.mkstemp(dir=dest, prefix=".part-")
        tmp = Path(tmp)
        try:
            with os.fdopen(fd, "wb") as out, urllib.request.urlopen(ref.download_url, timeout=timeout) as resp:
                length = resp.headers.get("Content-Length")
                for chunk in iter(lambda: resp.read(1 << 16), b""):
                    out.write(chunk)
            _verify(tmp, ref, int(length) if length is not None else None)
            os.replace(tmp, final)
            return final
        except (OSError, urllib.error.URLError, FetchError) as exc:
            last = exc
            log.warning("fetch %s attempt %d/%d failed: %s", ref.granule_name, attempt + 1, attempts, exc)
        finally:
            tmp.unlink(missing_ok=True)
    raise FetchError(f"{ref.granule_name}: failed after {attempts} attempts: {last}")


def fetch_all(refs, dest, jobs=4, **kwargs):
    """Fetch several granules with at most ``jobs`` concurrent downloads."""
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return list(pool.map(lambda r: fetch_granule(r, dest, **kwargs), refs))


def write_swath_file(scene, path, **manifest):
    meta = {"modality": int(scene.modality), "day": scene.day.isoformat()}
    if scene.granule:
        meta["granule"] = scene.granule
    meta.update(manifest)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(SWATH_MAGIC + "\n")
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for la, lo, v in zip(*(np.asarray(a, dtype=np.float64).tolist() for a in (scene.lats, scene.lons, scene.values))):
            fh.write(f"{la!r},{lo!r},{v!r}\n")


def read_swath_manifest(path):
    with open(path, encoding="utf-8") as fh:
        if fh.readline().rstrip("\r\n") != SWATH_MAGIC:
            raise FormatError(f"{path}: not a swath file (bad magic line)")
        try:
            return json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: bad manifest: {exc}") from exc


def read_swath_file(path, expected_modality=None):
    """Read a swath file; non-finite values are dropped and counted."""
    meta = read_swath_manifest(path)
    try:
        modality = int(meta["modality"])
        day = date.fromisoformat(meta["day"])
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: manifest lacks modality/day: {exc}") from exc
    if modality not in modalities.BY_INDEX:
        raise FormatError(f"{path}: unknown modality {modality}")
    if expected_modality is not None and modality != expected_modality:
        raise FormatError(f"{path}: modality {modality} in header, expected {expected_modality}")
    lats, lons, vals = [], [], []
    missing = rejected = 0
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        fh.readline()
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                la, lo = float(parts[0]), float(parts[1])
                v = float(parts[2]) if len(parts) > 2 and parts[2].strip() else math.nan
            except (ValueError, IndexError):
                rejected += 1
                continue
            if not (-90.0 <= la <= 90.0 and -180.0 <= lo <= 180.0):
                rejected += 1
                continue
            if not math.isfinite(v):
                missing += 1
                continue
            lats.append(la)
            lons.append(lo)
            vals.append(v)
    return SwathScene(
        modality,
        day,
        np.asarray(lats, dtype=np.float64),
        np.asarray(lons, dtype=np.float64),
        np.asarray(vals, dtype=np.float64),
        granule=meta.get("granule"),
        n_missing=missing,
        n_rejected=rejected,
    )
