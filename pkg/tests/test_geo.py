import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hexfleet.geo import (
    GeoHashCode,
    GeoPoint,
    azimuth_deg,
    displace,
    geohash_decode,
    geohash_encode,
    haversine_km,
    location_embedding,
)

finite_lat = st.floats(min_value=-90, max_value=90, allow_nan=False)
finite_lon = st.floats(min_value=-180, max_value=180, allow_nan=False)


def test_geopoint_rejects_out_of_range():
    with pytest.raises(ValueError):
        GeoPoint(91, 0)
    with pytest.raises(ValueError):
        GeoPoint(0, -181)
    with pytest.raises(ValueError):
        GeoPoint(float("nan"), 0)


def test_geohashcode_rejects_bad_alphabet():
    with pytest.raises(ValueError):
        GeoHashCode("ab!")
    with pytest.raises(ValueError):
        GeoHashCode("ai")  # 'i' not in the alphabet
    assert GeoHashCode("u4pru").precision == 5


def test_encode_reference_vector():
    # Cross-checked against an independent bisection implementation.
    assert geohash_encode(GeoPoint(57.64911, 10.40744), 11).code == "u4pruydqqvj"


def test_encode_maximal_corner():
    assert geohash_encode(GeoPoint(90, 180), 4).code == "zzzz"


def test_encode_origin():
    assert geohash_encode(GeoPoint(0, 0), 1).code == "s"


def test_encode_invalid_precision():
    with pytest.raises(ValueError):
        geohash_encode(GeoPoint(0, 0), 0)
    with pytest.raises(ValueError):
        geohash_encode(GeoPoint(0, 0), 17)


def test_decode_single_char():
    center, lat_err, lon_err = geohash_decode("s")
    assert center.lat == pytest.approx(22.5)
    assert center.lon == pytest.approx(22.5)
    assert lat_err == pytest.approx(22.5)
    assert lon_err == pytest.approx(22.5)


def test_decode_corner_cell():
    center, lat_err, lon_err = geohash_decode("zzzz")
    assert 90 - 2 * lat_err < center.lat < 90
    assert 180 - 2 * lon_err < center.lon < 180


def test_decode_rejects_bad_char():
    with pytest.raises(ValueError):
        geohash_decode("u4l")  # 'l' excluded from the alphabet


@given(finite_lat, finite_lon, st.integers(min_value=1, max_value=12))
@settings(max_examples=200)
def test_roundtrip_containment(lat, lon, precision):
    p = GeoPoint(lat, lon)
    code = geohash_encode(p, precision)
    center, lat_err, lon_err = geohash_decode(code)
    assert center.lat - lat_err <= p.lat <= center.lat + lat_err
    assert center.lon - lon_err <= p.lon <= center.lon + lon_err
    assert geohash_encode(center, precision).code == code.code


def test_embedding_corners_and_origin():
    assert location_embedding(GeoPoint(90, 180), 2).tolist() == [1.0] * 10
    assert location_embedding(GeoPoint(-90, -180), 2).tolist() == [0.0] * 10
    # Interleave of (0, 0): lon>=0, lat>=0, then all zeros -> 11000 = 's'.
    assert location_embedding(GeoPoint(0, 0), 1).tolist() == [1.0, 1.0, 0.0, 0.0, 0.0]


@given(finite_lat, finite_lon, st.integers(min_value=1, max_value=11))
@settings(max_examples=100)
def test_embedding_prefix_and_code_consistency(lat, lon, precision):
    p = GeoPoint(lat, lon)
    emb = location_embedding(p, precision)
    longer = location_embedding(p, precision + 1)
    assert np.array_equal(emb, longer[: 5 * precision])
    assert set(np.unique(emb)).issubset({0.0, 1.0})


def test_haversine_basics():
    a = GeoPoint(12.5, -30.25)
    assert haversine_km(a, a) == 0
    assert haversine_km(GeoPoint(0, 0), GeoPoint(0, 1)) == pytest.approx(111.195, abs=0.01)


@given(finite_lat, finite_lon, finite_lat, finite_lon)
@settings(max_examples=100)
def test_haversine_symmetry(lat1, lon1, lat2, lon2):
    a, b = GeoPoint(lat1, lon1), GeoPoint(lat2, lon2)
    assert haversine_km(a, b) == pytest.approx(haversine_km(b, a), abs=1e-9)


def test_azimuth_cardinal_directions():
    o = GeoPoint(0, 0)
    assert azimuth_deg(o, GeoPoint(1, 0)) == pytest.approx(0.0)
    assert azimuth_deg(o, GeoPoint(0, 1)) == pytest.approx(90.0)
    assert azimuth_deg(o, GeoPoint(-1, 0)) == pytest.approx(180.0)
    assert azimuth_deg(o, GeoPoint(0, -1)) == pytest.approx(270.0)


def test_azimuth_coincident_points_rejected():
    with pytest.raises(ValueError):
        azimuth_deg(GeoPoint(1, 1), GeoPoint(1, 1))


@given(finite_lat, finite_lon, finite_lat, finite_lon)
@settings(max_examples=100)
def test_azimuth_range(lat1, lon1, lat2, lon2):
    a, b = GeoPoint(lat1, lon1), GeoPoint(lat2, lon2)
    if (a.lat, a.lon) == (b.lat, b.lon):
        return
    assert 0 <= azimuth_deg(a, b) < 360


def test_displace_zero_distance_identity():
    p = GeoPoint(48.1, 11.5)
    assert displace(p, 0, 123.0) is p


def test_displace_one_degree_north():
    dest = displace(GeoPoint(0, 0), 111.195, 0.0)
    assert dest.lat == pytest.approx(1.0, abs=1e-4)
    assert dest.lon == pytest.approx(0.0, abs=1e-6)


def test_displace_rejects_negative():
    with pytest.raises(ValueError):
        displace(GeoPoint(0, 0), -1, 0)


@given(
    st.floats(min_value=-80, max_value=80),
    st.floats(min_value=-179, max_value=179),
    st.floats(min_value=1e-3, max_value=50),
    st.floats(min_value=0, max_value=359.999),
)
@settings(max_examples=200)
def test_displace_haversine_azimuth_inverse_triple(lat, lon, dis, deg):
    start = GeoPoint(lat, lon)
    dest = displace(start, dis, deg)
    assert abs(haversine_km(start, dest) - dis) <= 1e-6
    rec = azimuth_deg(start, dest)
    ang = abs(rec - deg)
    ang = min(ang, 360 - ang)
    # Angular error expressed as arc displacement at the destination.
    assert math.radians(ang) * dis <= 1e-6
