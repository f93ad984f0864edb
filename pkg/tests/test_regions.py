import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from brwre.regions import Ball, Box, Union, region_from_dict


def test_half_open_box():
    b = Box([0.0], [1.0])
    assert b.contains(np.array([[0.0], [0.5], [1.0]])).tolist() == [True, True, False]
    closed = Box([0.0], [1.0], closed=True)
    assert closed.contains(np.array([[1.0]])).tolist() == [True]


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=200), st.floats(-5, 0), st.floats(0.01, 2))
def test_tilings_partition(xs, start, width):
    pts = np.array(xs)[:, None]
    edges = [-math.inf] + [start + k * width for k in range(11)] + [math.inf]
    total = sum(int(Box([lo], [hi]).contains(pts).sum()) for lo, hi in zip(edges[:-1], edges[1:]))
    assert total == len(xs)


def test_ball_and_union():
    u = Union((Box([-math.inf], [-0.5], closed=True), Ball([1.0], 0.25)))
    got = u.contains(np.array([[-1.0], [-0.5], [0.0], [1.25], [1.3]])).tolist()
    assert got == [True, True, False, True, False]


def test_scaling_and_projection():
    b = Box([0.4], [0.6]).scaled(10)
    assert np.allclose(b.lower, [4.0]) and np.allclose(b.upper, [6.0])
    assert np.allclose(Box([0.4], [0.6]).project(np.array([0.0])), [0.4])
    assert np.allclose(Ball([0.0, 0.0], 1.0).project(np.array([3.0, 4.0])), [0.6, 0.8])


def test_dict_round_trip():
    spec = {"union": [{"box": {"lower": [0.5], "upper": [None]}}, {"ball": {"center": [0.0], "radius": 2.0}}]}
    r = region_from_dict(spec)
    assert region_from_dict(r.to_dict()).to_dict() == r.to_dict()
    assert r.contains(np.array([[100.0]])).tolist() == [True]


def test_unknown_region_rejected():
    with pytest.raises((KeyError, ValueError)):
        region_from_dict({"sphere": {}})
