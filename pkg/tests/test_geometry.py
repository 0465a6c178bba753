import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conceptloop import numerics as nx
from conceptloop.geometry import (BoxN, ContainmentError, MosaicLayout, box_iou, log_soft_box_tensor,
                                  mask_iou, rasterize_soft_box, soft_box_tensor, to_global, to_local)

unit = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def boxes(draw):
    x1, x2 = sorted((draw(unit), draw(unit)))
    y1, y2 = sorted((draw(unit), draw(unit)))
    return BoxN(x1, y1, x2, y2)


def raster_iou(a: BoxN, b: BoxN, n: int = 1000) -> float:
    c = (np.arange(n) + 0.5) / n
    x, y = np.meshgrid(c, c)
    ma = (x >= a.x1) & (x < a.x2) & (y >= a.y1) & (y < a.y2)
    mb = (x >= b.x1) & (x < b.x2) & (y >= b.y1) & (y < b.y2)
    return (ma & mb).sum() / (ma | mb).sum()


@pytest.mark.parametrize("a,b,expected", [
    ((0, 0, 0.5, 0.5), (0, 0, 0.5, 0.5), 1.0),
    ((0, 0, 0.5, 0.5), (0.5, 0.5, 1, 1), 0.0),
    ((0, 0, 0.5, 1), (0.25, 0, 0.75, 1), 1 / 3),
])
def test_box_iou_examples(a, b, expected):
    assert box_iou(BoxN(*a), BoxN(*b)) == pytest.approx(expected, abs=1e-15)


def test_box_iou_third_matches_fine_rasterization():
    a, b = BoxN(0, 0, 0.5, 1), BoxN(0.25, 0, 0.75, 1)
    assert raster_iou(a, b) == pytest.approx(box_iou(a, b), abs=1e-3)


def test_box_iou_degenerate_union_is_zero():
    p = BoxN(0.3, 0.3, 0.3, 0.3)
    assert p.area == 0.0
    assert box_iou(p, p) == 0.0


@settings(max_examples=200, deadline=None)
@given(boxes(), boxes())
def test_box_iou_symmetric_and_bounded(a, b):
    v = box_iou(a, b)
    assert v == box_iou(b, a)
    assert 0.0 <= v <= 1.0
    if v == 1.0:
        assert a.area > 0
        assert np.allclose(a.as_tuple(), b.as_tuple(), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(boxes())
def test_box_iou_self_is_one_for_positive_area(a):
    assume(a.area > 0)
    assert box_iou(a, a) == 1.0


@pytest.mark.parametrize("bad", [(0.5, 0, 0.4, 1), (0, 0, 1.2, 1), (-0.1, 0, 0.5, 0.5),
                                 (0, 0, float("nan"), 1)])
def test_box_rejects_invalid_coordinates(bad):
    with pytest.raises(ValueError):
        BoxN(*bad)


def test_mask_iou_examples():
    g = np.zeros((2, 2))
    g[0, 0] = 1
    assert mask_iou(g, g) == 1.0
    other = np.zeros((2, 2))
    other[1, 1] = 1
    assert mask_iou(other, g) == 0.0
    p = np.zeros((2, 2))
    p[0, 0] = p[0, 1] = 1
    q = np.zeros((2, 2))
    q[0, 1] = q[1, 1] = 1
    assert mask_iou(p, q) == pytest.approx(1 / 3, abs=1e-15)


def test_mask_iou_empty_conventions():
    z = np.zeros((3, 3))
    one = z.copy()
    one[1, 1] = 1
    assert mask_iou(z, z) == 1.0
    assert mask_iou(z, one) == 0.0
    assert mask_iou(one, z) == 0.0


def test_mask_iou_contracts():
    with pytest.raises(nx.ContractError):
        mask_iou(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(nx.ContractError):
        mask_iou(np.zeros((2, 2)), np.zeros((2, 2)), theta=1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_mask_iou_self_is_one(h, w, seed):
    p = (np.random.default_rng(seed).random((h, w)) > 0.5).astype(float)
    assume(p.any())
    assert mask_iou(p, p) == 1.0


def test_binary_threshold_is_idempotent(rng):
    from conceptloop.geometry import binarize
    soft = rng.random((5, 5))
    once = binarize(soft, 0.3).astype(float)
    assert np.array_equal(binarize(once, 0.3).astype(float), once)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_tiles_partition_canvas(k):
    layout = MosaicLayout(k)
    rects = layout.tile_rects
    assert len(rects) == k * k
    assert sum(r.area for r in rects) == pytest.approx(1.0, abs=1e-15)
    for i in range(len(rects)):
        for j in range(i + 1, len(rects)):
            a, b = rects[i], rects[j]
            iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
            ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
            assert iw * ih == 0.0


def test_layout_roles_are_disjoint_and_cover():
    layout = MosaicLayout(2, proxy_indices=(1,))
    assert set(layout.support_indices) | set(layout.proxy_indices) == {0, 1, 2, 3}
    assert not set(layout.support_indices) & set(layout.proxy_indices)
    with pytest.raises(ValueError):
        MosaicLayout(2, proxy_indices=(7,))
    with pytest.raises(ValueError):
        MosaicLayout(0)


def test_to_global_examples():
    b = BoxN(0.1, 0.2, 0.3, 0.4)
    assert to_global(MosaicLayout(1), 0, b) == b
    assert to_global(MosaicLayout(2), 0, BoxN(0, 0, 1, 1)) == BoxN(0, 0, 0.5, 0.5)
    assert to_global(MosaicLayout(2), 3, BoxN(0.5, 0.5, 1, 1)) == BoxN(0.75, 0.75, 1, 1)
    with pytest.raises(nx.ContractError):
        to_global(MosaicLayout(2), 4, b)


def test_to_local_examples():
    assert to_local(MosaicLayout(2), 0, BoxN(0, 0, 0.5, 0.5)) == BoxN(0, 0, 1, 1)
    with pytest.raises(ContainmentError):
        to_local(MosaicLayout(2), 0, BoxN(0.4, 0.1, 0.6, 0.3))


@pytest.mark.parametrize("k", [1, 2, 4])
def test_round_trip_is_exact_for_dyadic_orders(k):
    # adding the tile offset drops low bits of arbitrary floats, so exactness
    # is asserted for coordinates on a 1/1024 grid (pixel-aligned boxes)
    rng = np.random.default_rng(k)
    layout = MosaicLayout(k)
    for _ in range(100):
        x1, x2 = np.sort(rng.integers(0, 1025, 2)) / 1024
        y1, y2 = np.sort(rng.integers(0, 1025, 2)) / 1024
        b = BoxN(float(x1), float(y1), float(x2), float(y2))
        t = int(rng.integers(k * k))
        assert to_local(layout, t, to_global(layout, t, b)) == b


def test_round_trip_is_exact_in_the_first_tile(rng):
    layout = MosaicLayout(2)
    for _ in range(100):
        x1, x2 = np.sort(rng.random(2))
        y1, y2 = np.sort(rng.random(2))
        b = BoxN(float(x1), float(y1), float(x2), float(y2))
        assert to_local(layout, 0, to_global(layout, 0, b)) == b


@settings(max_examples=300, deadline=None)
@given(st.sampled_from([1, 2, 3]), boxes(), st.integers(0, 8))
def test_round_trip_within_tolerance(k, b, t):
    layout = MosaicLayout(k)
    t = t % (k * k)
    back = to_local(layout, t, to_global(layout, t, b))
    assert np.max(np.abs(np.subtract(back.as_tuple(), b.as_tuple()))) <= 1e-12


def test_soft_box_saturates_to_ones_on_full_canvas():
    m = rasterize_soft_box(BoxN(0, 0, 1, 1), 16, 16, temp=1e-4)
    assert np.allclose(m, 1.0, atol=1e-12)


def test_zero_area_box_peaks_below_a_quarter():
    m = rasterize_soft_box(BoxN(0.5, 0.5, 0.5, 0.5), 32, 32, temp=1e-3)
    assert m.max() <= 0.25


def test_quarter_box_area_by_counting():
    m = rasterize_soft_box(BoxN(0, 0, 0.5, 0.5), 64, 64, temp=1e-3)
    count = int((m >= 0.5).sum())
    assert abs(count - 0.25 * 64 * 64) <= 0.02 * 0.25 * 64 * 64


def test_soft_box_tensor_matches_numpy_and_is_differentiable(rng):
    b = BoxN(0.2, 0.3, 0.7, 0.6)
    t = soft_box_tensor(nx.Tensor([b.as_tuple()]), 8, 6, 0.05)
    assert np.allclose(t.data.reshape(6, 8), rasterize_soft_box(b, 8, 6, 0.05), atol=1e-14)
    assert nx.grad_check(lambda x: nx.sum_all(soft_box_tensor(x, 8, 6, 0.05)),
                         np.array([b.as_tuple()])) < 1e-4


def test_log_soft_box_is_stable_log():
    b = nx.Tensor([[0.2, 0.3, 0.7, 0.6]])
    soft = soft_box_tensor(b, 8, 8, 0.05).data
    logs = log_soft_box_tensor(b, 8, 8, 0.05).data
    assert np.allclose(np.exp(logs), soft, atol=1e-14)
    far = log_soft_box_tensor(nx.Tensor([[0.0, 0.0, 0.01, 0.01]]), 64, 64, 1e-4).data
    assert np.all(np.isfinite(far))
    assert nx.grad_check(lambda x: nx.sum_all(log_soft_box_tensor(x, 8, 8, 0.05)),
                         b.data) < 1e-4
