import pytest
from hypothesis import given
from hypothesis import strategies as st

from conceptloop import router as rt


def words(n):
    return " ".join(["w"] * n)


def test_threshold_table():
    assert [rt.threshold(words(n)) for n in range(1, 7)] == [0.1, 0.2, 0.4, 0.8, 1.0, 1.0]


@pytest.mark.parametrize("instruction, expected", [
    ("dog", 0.1), ("", 0.1), ("   ", 0.1), ("a b c d", 0.8), ("a  b\tc\nd e f", 1.0),
])
def test_threshold_examples(instruction, expected):
    assert rt.threshold(instruction) == expected


@pytest.mark.parametrize("presence, n, path", [
    (0.5, 1, rt.Path.Direct), (0.5, 5, rt.Path.Reason), (1.0, 9, rt.Path.Direct),
])
def test_route_examples(presence, n, path):
    d = rt.route(presence, words(n))
    assert d.path is path and d.presence == presence and d.threshold == rt.threshold(words(n))


@pytest.mark.parametrize("n", range(1, 8))
def test_tie_routes_direct(n):
    t = rt.threshold(words(n))
    assert rt.route(t, words(n)).path is rt.Path.Direct


@pytest.mark.parametrize("presence", [-0.01, 1.01, float("nan")])
def test_presence_out_of_range(presence):
    with pytest.raises(ValueError):
        rt.route(presence, "dog")


@given(st.integers(1, 30))
def test_threshold_monotone_and_saturating(n):
    assert rt.threshold(words(n)) <= rt.threshold(words(n + 1))
    if n >= 5:
        assert rt.threshold(words(n)) == 1.0


@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 8))
def test_route_monotone_in_presence(a, b, n):
    lo, hi = sorted((a, b))
    if rt.route(lo, words(n)).path is rt.Path.Direct:
        assert rt.route(hi, words(n)).path is rt.Path.Direct
    assert (rt.route(lo, words(n)).path is rt.Path.Direct) == (lo >= rt.threshold(words(n)))
