"""Ground-truth event ingestion and HAB/NoHAB labelling.

Raw sample tables (one row per water sample, with a cell count) are parsed
into :class:`RawEvent` rows, then labelled: counts at or above the positive
threshold become HAB events, zero counts become NoHAB events, and anything
in between is dropped.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import date, datetime
from pathlib import Path

from .errors import DataError, SchemaError

log = logging.getLogger(__name__)

HAB = "HAB"
NOHAB = "NoHAB"

DEFAULT_THRESHOLD = 50_000.0
DEFAULT_SPECIES = "Karenia brevis"
# MODIS-Aqua/Terra coverage of the Florida record
DEFAULT_COVERAGE = (date(2003, 1, 1), date(2018, 6, 30))


@dataclass(frozen=True)
class ColumnSchema:
    """Maps the logical event fields onto the column names of one export."""

    lat: str = "latitude"
    lon: str = "longitude"
    date: str = "sample_date"
    species: str = "species"
    concentration: str = "cells_per_litre"
    id: str | None = None
    date_format: str = "%Y-%m-%d"

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def mandatory(self):
        return [self.lat, self.lon, self.date, self.species, self.concentration]


@dataclass(frozen=True)
class RawEvent:
    line: int
    id: str
    lat: float
    lon: float
    date: date
    species: str
    concentration: float | None


@dataclass(frozen=True)
class Reject:
    line: int
    reason: str
    raw: dict


@dataclass
class ParseResult:
    rows: list
    rejects: list = field(default_factory=list)


@dataclass(frozen=True)
class EventRecord:
    id: str
    lat: float
    lon: float
    date: date
    species: str
    concentration: float | None
    label: str

    @property
    def y(self):
        return 1 if self.label == HAB else 0

    def to_dict(self):
        d = asdict(self)
        d["date"] = self.date.isoformat()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            id=str(d["id"]),
            lat=float(d["lat"]),
            lon=float(d["lon"]),
            date=date.fromisoformat(d["date"]),
            species=d.get("species", ""),
            concentration=None if d.get("concentration") is None else float(d["concentration"]),
            label=d["label"],
        )


@dataclass
class LabelResult:
    records: list
    dropped: dict = field(default_factory=dict)

    @property
    def n_dropped(self):
        return sum(self.dropped.values())


def _parse_float(text):
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"non-finite number {text!r}")
    return v


def _parse_row(line, row, schema):
    lat = _parse_float(row[schema.lat])
    lon = _parse_float(row[schema.lon])
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"lat out of range: {lat}")
    if not -180.0 <= lon <= 180.0:
        raise ValueError(f"lon out of range: {lon}")
    day = datetime.strptime(row[schema.date].strip(), schema.date_format).date()
    raw_conc = (row.get(schema.concentration) or "").strip()
    conc = None
    if raw_conc:
        conc = _parse_float(raw_conc)
        if conc < 0:
            raise ValueError(f"negative concentration: {conc}")
    event_id = row[schema.id].strip() if schema.id else f"evt-{line:06d}"
    return RawEvent(line, event_id, lat, lon, day, row[schema.species].strip(), conc)


def parse_events(path, schema=None):
    """Read a UTF-8 CSV export into raw event rows.

    Rows that fail to parse go to ``rejects`` with a reason; a missing
    mandatory column is fatal.
    """
    schema = schema or ColumnSchema()
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return ParseResult([], [])
        missing = [c for c in schema.mandatory() if c not in reader.fieldnames]
        if schema.id and schema.id not in reader.fieldnames:
            missing.append(schema.id)
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        rows, rejects = [], []
        # line 1 is the header
        for line, row in enumerate(reader, start=2):
            try:
                rows.append(_parse_row(line, row, schema))
            except (ValueError, TypeError, KeyError) as exc:
                rejects.append(Reject(line, str(exc), dict(row)))
    if rejects:
        log.info("%s: %d rows parsed, %d rejected", path, len(rows), len(rejects))
    return ParseResult(rows, rejects)


def label_events(
    rows,
    positive_threshold=DEFAULT_THRESHOLD,
    species_filter=DEFAULT_SPECIES,
    inclusive=True,
    coverage=DEFAULT_COVERAGE,
):
    """Turn raw rows into labelled events.

    Counts >= ``positive_threshold`` (or > when ``inclusive`` is false) are
    HAB, counts of exactly zero are NoHAB, everything else is dropped and
    tallied by reason in ``LabelResult.dropped``.
    """
    if positive_threshold <= 0:
        raise ValueError("positive_threshold must be > 0")
    want = species_filter.strip().lower() if species_filter else None
    records = []
    dropped = {}

    def drop(reason):
        dropped[reason] = dropped.get(reason, 0) + 1

    for r in rows:
        if want is not None and r.species.lower() != want:
            drop("species")
            continue
        if coverage is not None and not coverage[0] <= r.date <= coverage[1]:
            drop("outside_coverage")
            continue
        c = r.concentration
        if c is None:
            drop("no_concentration")
            continue
        is_hab = c >= positive_threshold if inclusive else c > positive_threshold
        if is_hab:
            label = HAB
        elif c == 0:
            label = NOHAB
        else:
            drop("between_classes")
            continue
        records.append(EventRecord(r.id, r.lat, r.lon, r.date, r.species, c, label))
    return LabelResult(records, dropped)


def write_events_json(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in records], fh, indent=1)
        fh.write("\n")


def read_events_json(path):
    with open(path, encoding="utf-8") as fh:
        return [EventRecord.from_dict(d) for d in json.load(fh)]


def write_rejects(rejects, input_path):
    """Write rejects next to the input as ``<input>.rejects.jsonl``."""
    out = Path(str(input_path) + ".rejects.jsonl")
    with open(out, "w", encoding="utf-8") as fh:
        for r in rejects:
            fh.write(json.dumps({"line": r.line, "reason": r.reason, "raw": r.raw}) + "\n")
    return out
