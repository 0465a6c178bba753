"""Normalized boxes, masks, IoU and the KxK mosaic coordinate protocol.

Boxes are ``(x1, y1, x2, y2)`` with the origin at the top-left corner; pixel
``(row, col)`` of a ``w x h`` grid has its center at ``((col+0.5)/w, (row+0.5)/h)``.
Masks are plain ``(h, w)`` float arrays with values in ``[0, 1]``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx

MaskGrid = np.ndarray


class ContainmentError(ValueError):
    pass


@dataclass(frozen=True)
class BoxN:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not np.isfinite(v):
                raise ValueError(f"non-finite box coordinate in {self}")
        if not (0.0 <= self.x1 <= self.x2 <= 1.0 and 0.0 <= self.y1 <= self.y2 <= 1.0):
            raise ValueError(f"invalid normalized box {self.as_tuple()}")

    @classmethod
    def clipped(cls, x1, y1, x2, y2) -> "BoxN":
        x1, x2 = sorted((min(max(x1, 0.0), 1.0), min(max(x2, 0.0), 1.0)))
        y1, y2 = sorted((min(max(y1, 0.0), 1.0), min(max(y2, 0.0), 1.0)))
        return cls(float(x1), float(y1), float(x2), float(y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))


FULL_BOX = BoxN(0.0, 0.0, 1.0, 1.0)


def box_iou(a: BoxN, b: BoxN) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def binarize(m: MaskGrid, theta: float = 0.5) -> np.ndarray:
    return np.asarray(m) >= theta


def mask_iou(p: MaskGrid, g: MaskGrid, theta: float = 0.5) -> float:
    """IoU of ``binary(p, theta)`` against ``g``; two empty masks score 1."""
    p, g = np.asarray(p), np.asarray(g)
    if p.shape != g.shape:
        raise nx.ContractError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if not 0.0 < theta < 1.0:
        raise nx.ContractError(f"theta must lie in (0, 1), got {theta}")
    pb = p >= theta
    gb = g >= 0.5
    union = np.count_nonzero(pb | gb)
    if union == 0:
        return 1.0
    return np.count_nonzero(pb & gb) / union


# ---- mosaic -----------------------------------------------------------------


@dataclass(frozen=True)
class MosaicLayout:
    k: int
    proxy_indices: tuple[int, ...] = ()
    tile_rects: tuple[BoxN, ...] = field(init=False)
    support_indices: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"mosaic order must be >= 1, got {self.k}")
        n = self.k * self.k
        proxy = tuple(sorted(set(self.proxy_indices)))
        if any(not 0 <= i < n for i in proxy):
            raise ValueError(f"proxy index out of range for k={self.k}: {proxy}")
        k = self.k
        rects = tuple(BoxN((t % k) / k, (t // k) / k, (t % k + 1) / k, (t // k + 1) / k)
                      for t in range(n))
        object.__setattr__(self, "proxy_indices", proxy)
        object.__setattr__(self, "tile_rects", rects)
        object.__setattr__(self, "support_indices",
                           tuple(i for i in range(n) if i not in proxy))

    @property
    def n_tiles(self) -> int:
        return self.k * self.k

    def _rowcol(self, tile: int) -> tuple[int, int]:
        if not 0 <= tile < self.n_tiles:
            raise nx.ContractError(f"tile {tile} out of range for k={self.k}")
        return tile // self.k, tile % self.k


def to_global(layout: MosaicLayout, tile: int, local_box: BoxN) -> BoxN:
    row, col = layout._rowcol(tile)
    k = layout.k
    return BoxN((col + local_box.x1) / k, (row + local_box.y1) / k,
                (col + local_box.x2) / k, (row + local_box.y2) / k)


def to_local(layout: MosaicLayout, tile: int, global_box: BoxN, tol: float = 1e-12) -> BoxN:
    row, col = layout._rowcol(tile)
    k = layout.k
    vals = [global_box.x1 * k - col, global_box.y1 * k - row,
            global_box.x2 * k - col, global_box.y2 * k - row]
    if any(v < -tol or v > 1.0 + tol for v in vals):
        raise ContainmentError(f"box {global_box.as_tuple()} leaves tile {tile} of k={k}")
    return BoxN(*(min(1.0, max(0.0, v)) for v in vals))


# ---- rasterization ----------------------------------------------------------


@functools.lru_cache(maxsize=16)
def pixel_centers(w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Center coordinates, each of shape ``(h, w)`` (read-only, cached)."""
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    x, y = np.meshgrid(xs, ys)
    x.flags.writeable = False
    y.flags.writeable = False
    return x, y


def _sig(x):
    return nx._sigmoid_np(np.asarray(x, dtype=np.float64))


def rasterize_soft_box(b: BoxN, w: int, h: int, temp: float) -> MaskGrid:
    if temp <= 0:
        raise nx.ContractError(f"temp must be positive, got {temp}")
    x, y = pixel_centers(w, h)
    return (_sig((x - b.x1) / temp) * _sig((b.x2 - x) / temp)
            * _sig((y - b.y1) / temp) * _sig((b.y2 - y) / temp))


@functools.lru_cache(maxsize=16)
def _center_columns(w: int, h: int) -> tuple[nx.Tensor, nx.Tensor]:
    x, y = pixel_centers(w, h)
    return nx.Tensor(x.reshape(-1, 1)), nx.Tensor(y.reshape(-1, 1))


def soft_box_tensor(box: nx.Tensor, w: int, h: int, temp: float) -> nx.Tensor:
    """Differentiable soft box: ``box`` is a 1x4 tensor, result is ``(h*w) x 1``."""
    if temp <= 0:
        raise nx.ContractError(f"temp must be positive, got {temp}")
    xc, yc = _center_columns(w, h)
    s = 1.0 / temp
    # scalar coordinates broadcast over the pixel column
    fx1 = nx.sigmoid((xc - nx.take(box, 0, 0)) * s)
    fx2 = nx.sigmoid((nx.take(box, 0, 2) - xc) * s)
    fy1 = nx.sigmoid((yc - nx.take(box, 0, 1)) * s)
    fy2 = nx.sigmoid((nx.take(box, 0, 3) - yc) * s)
    return fx1 * fx2 * fy1 * fy2


def log_soft_box_tensor(box: nx.Tensor, w: int, h: int, temp: float) -> nx.Tensor:
    """Elementwise log of :func:`soft_box_tensor`, computed stably.

    Outside the box it falls off linearly with distance, so every pixel passes
    gradient to the nearest edges.
    """
    if temp <= 0:
        raise nx.ContractError(f"temp must be positive, got {temp}")
    xc, yc = _center_columns(w, h)
    s = 1.0 / temp
    return (nx.log_sigmoid((xc - nx.take(box, 0, 0)) * s)
            + nx.log_sigmoid((nx.take(box, 0, 2) - xc) * s)
            + nx.log_sigmoid((yc - nx.take(box, 0, 1)) * s)
            + nx.log_sigmoid((nx.take(box, 0, 3) - yc) * s))


def rasterize_soft_disc(cx: float, cy: float, r: float, w: int, h: int, temp: float) -> MaskGrid:
    x, y = pixel_centers(w, h)
    d = np.sqrt((x - cx) ** 2 + (y - cy) ** 2)
    return _sig((r - d) / temp)
