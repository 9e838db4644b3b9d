"""Coordinate math and GeoHash encoding.

Pure functions on immutable values: WGS-84 points, base-32 GeoHash codes,
bit-vector location embeddings, and the great-circle triple
(haversine distance, initial bearing, forward displacement) used for action
targets. Spherical Earth model; sub-meter error at dispatch scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0088

BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"
_CHAR_INDEX = {c: i for i, c in enumerate(BASE32)}


@dataclass(frozen=True)
class GeoPoint:
    """A WGS-84 coordinate. Construction rejects non-finite or out-of-range values."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class GeoHashCode:
    """A base-32 GeoHash string; precision equals the character count."""

    code: str

    def __post_init__(self):
        if not self.code:
            raise ValueError("empty geohash code")
        for c in self.code:
            if c not in _CHAR_INDEX:
                raise ValueError(f"character {c!r} outside geohash alphabet")

    @property
    def precision(self) -> int:
        return len(self.code)


def _interleave_bits(p: GeoPoint, n_bits: int) -> list[int]:
    """Longitude-first binary bisection; bit 1 when the value is >= the midpoint."""
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    bits = []
    even = True
    while len(bits) < n_bits:
        if even:
            mid = (lon_lo + lon_hi) / 2
            if p.lon >= mid:
                bits.append(1)
                lon_lo = mid
            else:
                bits.append(0)
                lon_hi = mid
        else:
            mid = (lat_lo + lat_hi) / 2
            if p.lat >= mid:
                bits.append(1)
                lat_lo = mid
            else:
                bits.append(0)
                lat_hi = mid
        even = not even
    return bits


def _check_precision(precision: int) -> None:
    if not isinstance(precision, int) or isinstance(precision, bool):
        raise ValueError(f"precision must be an integer, got {precision!r}")
    if not 1 <= precision <= 16:
        raise ValueError(f"precision {precision} outside [1, 16]")


def geohash_encode(p: GeoPoint, precision: int = 8) -> GeoHashCode:
    """Encode a point as a base-32 GeoHash of the given character count.

    >>> geohash_encode(GeoPoint(57.64911, 10.40744), 11).code
    'u4pruydqqvj'
    """
    _check_precision(precision)
    bits = _interleave_bits(p, 5 * precision)
    chars = []
    for i in range(precision):
        v = 0
        for b in bits[5 * i : 5 * i + 5]:
            v = (v << 1) | b
        chars.append(BASE32[v])
    return GeoHashCode("".join(chars))


def geohash_decode(c: GeoHashCode | str) -> tuple[GeoPoint, float, float]:
    """Decode a geohash to its cell center plus latitude/longitude half-widths."""
    code = c.code if isinstance(c, GeoHashCode) else GeoHashCode(c).code
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    even = True
    for ch in code:
        v = _CHAR_INDEX[ch]
        for shift in range(4, -1, -1):
            bit = (v >> shift) & 1
            if even:
                mid = (lon_lo + lon_hi) / 2
                if bit:
                    lon_lo = mid
                else:
                    lon_hi = mid
            else:
                mid = (lat_lo + lat_hi) / 2
                if bit:
                    lat_lo = mid
                else:
                    lat_hi = mid
            even = not even
    center = GeoPoint((lat_lo + lat_hi) / 2, (lon_lo + lon_hi) / 2)
    return center, (lat_hi - lat_lo) / 2, (lon_hi - lon_lo) / 2


def location_embedding(p: GeoPoint, precision: int = 8) -> np.ndarray:
    """The 5*precision interleaved geohash bits as a 0/1 float vector.

    Prefix-stable: the first 5*k entries equal the k-character embedding.
    """
    _check_precision(precision)
    return np.array(_interleave_bits(p, 5 * precision), dtype=np.float64)


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in kilometers."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    s = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(s)))


def azimuth_deg(a: GeoPoint, b: GeoPoint) -> float:
    """Initial great-circle bearing from a to b, clockwise from true north, in [0, 360)."""
    if a.lat == b.lat and a.lon == b.lon:
        raise ValueError("azimuth undefined for coincident points")
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dlmb = math.radians(b.lon - a.lon)
    y = math.sin(dlmb) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlmb)
    deg = math.degrees(math.atan2(y, x)) % 360.0
    return 0.0 if deg >= 360.0 else deg  # tiny negative angles wrap to exactly 360.0


def displace(p: GeoPoint, dis_km: float, deg: float) -> GeoPoint:
    """Destination of moving dis_km along bearing deg (great-circle forward solution)."""
    if dis_km < 0:
        raise ValueError(f"negative displacement distance {dis_km}")
    if dis_km == 0:
        return p
    delta = dis_km / EARTH_RADIUS_KM
    theta = math.radians(deg % 360.0)
    phi1 = math.radians(p.lat)
    lmb1 = math.radians(p.lon)
    sin_phi2 = math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(theta)
    phi2 = math.asin(max(-1.0, min(1.0, sin_phi2)))
    lmb2 = lmb1 + math.atan2(
        math.sin(theta) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * math.sin(phi2),
    )
    lon = math.degrees(lmb2)
    if lon > 180.0 or lon <= -180.0:
        lon = (lon + 180.0) % 360.0 - 180.0
    return GeoPoint(math.degrees(phi2), lon)
