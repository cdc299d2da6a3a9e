"""Local transverse Mercator projection on the WGS84 ellipsoid.

Krüger n-series to sixth order (Karney 2011 coefficients). The projection
is centred on an arbitrary (lat0, lon0): the central meridian passes through
lon0 and northings are measured from lat0, so the centre maps to (0, 0).
Unit scale on the central meridian.
"""

import numpy as np

WGS84_A = 6378137.0
WGS84_INV_F = 298.257223563
WGS84_F = 1.0 / WGS84_INV_F
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)
WGS84_E = np.sqrt(WGS84_E2)

MAX_ABS_LAT = 84.0

_n = WGS84_F / (2.0 - WGS84_F)
_n2, _n3, _n4, _n5, _n6 = _n**2, _n**3, _n**4, _n**5, _n**6

# rectifying radius
RECT_A = WGS84_A / (1.0 + _n) * (1.0 + _n2 / 4.0 + _n4 / 64.0 + _n6 / 256.0)

_ALPHA = np.array([
    _n / 2 - 2 * _n2 / 3 + 5 * _n3 / 16 + 41 * _n4 / 180 - 127 * _n5 / 288 + 7891 * _n6 / 37800,
    13 * _n2 / 48 - 3 * _n3 / 5 + 557 * _n4 / 1440 + 281 * _n5 / 630 - 1983433 * _n6 / 1935360,
    61 * _n3 / 240 - 103 * _n4 / 140 + 15061 * _n5 / 26880 + 167603 * _n6 / 181440,
    49561 * _n4 / 161280 - 179 * _n5 / 168 + 6601661 * _n6 / 7257600,
    34729 * _n5 / 80640 - 3418889 * _n6 / 1995840,
    212378941 * _n6 / 319334400,
])

_BETA = np.array([
    _n / 2 - 2 * _n2 / 3 + 37 * _n3 / 96 - _n4 / 360 - 81 * _n5 / 512 + 96199 * _n6 / 604800,
    _n2 / 48 + _n3 / 15 - 437 * _n4 / 1440 + 46 * _n5 / 105 - 1118711 * _n6 / 3870720,
    17 * _n3 / 480 - 37 * _n4 / 840 - 209 * _n5 / 4480 + 5569 * _n6 / 90720,
    4397 * _n4 / 161280 - 11 * _n5 / 504 - 830251 * _n6 / 7257600,
    4583 * _n5 / 161280 - 108847 * _n6 / 3991680,
    20648693 * _n6 / 638668800,
])

_J2 = 2.0 * np.arange(1, 7)


class ProjectionError(ValueError):
    pass


def _conformal_tan(tau):
    """tan of the conformal latitude given tan of the geographic latitude."""
    sigma = np.sinh(WGS84_E * np.arctanh(WGS84_E * tau / np.hypot(1.0, tau)))
    return tau * np.hypot(1.0, sigma) - sigma * np.hypot(1.0, tau)


def _geographic_tan(taup):
    """Invert :func:`_conformal_tan` by Newton iteration."""
    tau = taup / (1.0 - WGS84_E2)
    for _ in range(8):
        tp = _conformal_tan(tau)
        dtau = (taup - tp) * (1.0 + (1.0 - WGS84_E2) * tau**2) / (
            (1.0 - WGS84_E2) * np.hypot(1.0, tp) * np.hypot(1.0, tau)
        )
        tau = tau + dtau
        if np.all(np.abs(dtau) <= 1e-15 * np.maximum(1.0, np.abs(tau))):
            break
    return tau


def _forward(lat_deg, dlon_deg):
    phi = np.radians(lat_deg)
    lam = np.radians(dlon_deg)
    taup = _conformal_tan(np.tan(phi))
    xip = np.arctan2(taup, np.cos(lam))
    etap = np.arcsinh(np.sin(lam) / np.hypot(taup, np.cos(lam)))
    xi_terms = xip[..., None] * _J2
    eta_terms = etap[..., None] * _J2
    xi = xip + np.sum(_ALPHA * np.sin(xi_terms) * np.cosh(eta_terms), axis=-1)
    eta = etap + np.sum(_ALPHA * np.cos(xi_terms) * np.sinh(eta_terms), axis=-1)
    return RECT_A * eta, RECT_A * xi


def _inverse(x, y):
    xi = y / RECT_A
    eta = x / RECT_A
    xi_terms = xi[..., None] * _J2
    eta_terms = eta[..., None] * _J2
    xip = xi - np.sum(_BETA * np.sin(xi_terms) * np.cosh(eta_terms), axis=-1)
    etap = eta - np.sum(_BETA * np.cos(xi_terms) * np.sinh(eta_terms), axis=-1)
    taup = np.sin(xip) / np.hypot(np.sinh(etap), np.cos(xip))
    lam = np.arctan2(np.sinh(etap), np.cos(xip))
    tau = _geographic_tan(taup)
    return np.degrees(np.arctan(tau)), np.degrees(lam)


def _wrap(dlon):
    return (np.asarray(dlon, dtype=np.float64) + 180.0) % 360.0 - 180.0


class LocalTM:
    """Transverse Mercator centred on ``(lat0, lon0)``."""

    def __init__(self, lat0, lon0):
        if abs(lat0) >= MAX_ABS_LAT:
            raise ProjectionError(f"centre latitude {lat0} outside ±{MAX_ABS_LAT}")
        self.lat0 = float(lat0)
        self.lon0 = float(lon0)
        _, self._y0 = _forward(np.asarray(self.lat0), np.asarray(0.0))

    def forward(self, lat, lon):
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        if np.any(np.abs(lat) >= MAX_ABS_LAT):
            raise ProjectionError(f"latitude beyond ±{MAX_ABS_LAT} degrees")
        x, y = _forward(lat, _wrap(lon - self.lon0))
        return x, y - self._y0

    def inverse(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        lat, dlon = _inverse(x, y + self._y0)
        return lat, _wrap(dlon + self.lon0)
