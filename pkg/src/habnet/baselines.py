"""Conventional threshold detectors: spectral shape, backscatter ratio, Chl-a anomaly."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import modalities as M

log = logging.getLogger(__name__)

SS_BANDS = (443.0, 488.0, 531.0)
BBP_SLOPE = 2.058
BBP_OFFSET = -0.00182
CENTER_KM = 10.0


class ModelRegimeError(ValueError):
    """Inputs outside the range where a bio-optical formula is defined."""


def spectral_shape(rrs_minus, rrs_center, rrs_plus, lam_minus=SS_BANDS[0], lam=SS_BANDS[1], lam_plus=SS_BANDS[2]):
    """Deviation of the centre band from the chord joining its neighbours."""
    if lam_plus == lam_minus:
        raise ValueError("neighbour wavelengths must differ")
    a = np.asarray(rrs_minus, dtype=np.float64)
    b = np.asarray(rrs_center, dtype=np.float64)
    c = np.asarray(rrs_plus, dtype=np.float64)
    return b - a - (c - a) * ((lam - lam_minus) / (lam_plus - lam_minus))


def bbp555(rrs555):
    return BBP_OFFSET + BBP_SLOPE * np.asarray(rrs555, dtype=np.float64)


def bbp555_morel(chla):
    chla = np.asarray(chla, dtype=np.float64)
    if np.any(~(chla > 0)):
        raise ModelRegimeError("Chl-a must be positive")
    d = 0.3 * chla**0.62 * (0.002 + 0.02 * (0.5 - 0.25 * np.log10(chla)))
    if np.any(d <= 0):
        raise ModelRegimeError("Morel backscatter is non-positive at this Chl-a")
    return d


def backscatter_ratio(rrs555, chla):
    return bbp555(rrs555) / bbp555_morel(chla)


def chla_anomaly(chla, chla_background):
    return np.asarray(chla) - np.asarray(chla_background)


@dataclass(frozen=True)
class Rule:
    name: str
    reading: str  # "ss488" | "bp_ratio" | "chla_anom"
    op: str  # "<" | ">"
    threshold: float

    def __call__(self, value):
        v = np.asarray(value, dtype=np.float64)
        return (v < self.threshold) if self.op == "<" else (v > self.threshold)


RULES = (
    Rule("SS(488)<0.0", "ss488", "<", 0.0),
    Rule("Bp_ratio<1.0", "bp_ratio", "<", 1.0),
    Rule("Bp_ratio<2.0", "bp_ratio", "<", 2.0),
    Rule("Chla_Anom>1.0", "chla_anom", ">", 1.0),
    Rule("Chla_Anom>10.0", "chla_anom", ">", 10.0),
    Rule("Chla_Anom>100.0", "chla_anom", ">", 100.0),
)
RULES_BY_NAME = {r.name: r for r in RULES}


@dataclass
class BaselineReading:
    event_id: str
    ss488: float | None
    bp_ratio: float | None
    chla_anom: float | None
    source: str

    def get(self, name):
        return getattr(self, name)


def central_window(spec, km=CENTER_KM):
    """Row/col slices of the ``km x km`` block centred on the event node."""
    n = max(1, int(round(km * 1000.0 / spec.cell_size)))
    ci, cj = spec.center_index
    r0 = max(0, ci - n // 2)
    c0 = max(0, cj - n // 2)
    return slice(r0, min(spec.height, r0 + n)), slice(c0, min(spec.width, c0 + n))


def _median(v):
    v = v[np.isfinite(v)]
    return float(np.median(v)) if v.size else None


def event_reading(cube, day=-1, km=CENTER_KM):
    """Per-event scalars: medians over valid cells of the central block on ``day``."""
    rs, cs = central_window(cube.spec, km)

    def cells(m):
        if m not in cube.modalities:
            return None, None
        j = cube.m(m)
        return cube.values[j, day, rs, cs].astype(np.float64), cube.mask[j, day, rs, cs]

    ss = bp = an = None
    bands = [cells(m) for m in (M.RRS443, M.RRS488, M.RRS531)]
    if all(b[0] is not None for b in bands):
        ok = bands[0][1] & bands[1][1] & bands[2][1]
        ss = _median(spectral_shape(bands[0][0][ok], bands[1][0][ok], bands[2][0][ok]))
    r555, chl = cells(M.RRS555), cells(M.CHLA)
    if r555[0] is not None and chl[0] is not None:
        ok = r555[1] & chl[1] & (chl[0] > 0)
        ok &= chl[0] < 250.0  # Morel denominator turns non-positive near 251 mg/m3
        bp = _median(backscatter_ratio(r555[0][ok], chl[0][ok])) if ok.any() else None
    anom = cells(M.CHLA_ANOMALY)
    if anom[0] is not None:
        an = _median(anom[0][anom[1]])
    src = f"median over valid cells, central {km:g}x{km:g} km, day index {day}"
    return BaselineReading(cube.event.id, ss, bp, an, src)


@dataclass
class RuleOutcome:
    rule: str
    predictions: np.ndarray
    labels: np.ndarray
    n_excluded: int


def threshold_classify(readings, labels, rule):
    """Apply one rule; events without the needed reading are excluded and counted."""
    if isinstance(rule, str):
        rule = RULES_BY_NAME[rule]
    vals = [r.get(rule.reading) for r in readings]
    keep = [k for k, v in enumerate(vals) if v is not None and math.isfinite(v)]
    pred = rule(np.array([vals[k] for k in keep], dtype=np.float64)).astype(int)
    y = np.asarray(labels)[keep].astype(int)
    return RuleOutcome(rule.name, pred, y, len(readings) - len(keep))
