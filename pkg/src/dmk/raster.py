"""Polygon <-> mask conversion and per-building crops.

Masks are 2-D ``uint8`` numpy arrays indexed ``[row, col]``: 0 is background,
1-4 are damage levels. Polygon coordinates are ``(x, y) = (col, row)`` in pixel
units, so pixel ``(col, row)`` covers the unit square whose corner is
``(col, row)`` and whose centre is ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .labels import Polygon

MAX_CLASS = 4


class RasterError(ValueError):
    pass


def validate_mask(mask: np.ndarray, binary: bool = False) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
        raise RasterError(f"mask must be a non-empty 2-D array, got shape {mask.shape}")
    if mask.dtype.kind not in "iub":
        raise RasterError(f"mask must hold integers, got {mask.dtype}")
    limit = 1 if binary else MAX_CLASS
    if mask.size and (mask.min() < 0 or mask.max() > limit):
        raise RasterError(f"mask values must lie in 0..{limit}")
    return mask


def _ring_edges(polygon: Polygon) -> np.ndarray:
    """All ring edges as an (E, 4) array of x0, y0, x1, y1."""
    edges = []
    for ring in polygon.rings:
        if len(ring) < 3:
            raise RasterError("degenerate ring with fewer than 3 vertices")
        pts = np.asarray(ring, dtype=np.float64)
        edges.append(np.hstack([pts, np.roll(pts, -1, axis=0)]))
    return np.vstack(edges)


def polygon_coverage(polygon: Polygon, width: int, height: int) -> np.ndarray:
    """Boolean (height, width) array of pixels whose centre is inside.

    Even-odd rule with scanlines through pixel centres. An edge counts for a
    scanline when the scanline lies in the half-open span ``[min_y, max_y)``;
    a centre is inside when an odd number of crossings lie strictly to its
    right.
    """
    edges = _ring_edges(polygon)
    out = np.zeros((height, width), dtype=bool)
    y_lo = np.minimum(edges[:, 1], edges[:, 3])
    y_hi = np.maximum(edges[:, 1], edges[:, 3])
    r0 = max(int(math.floor(y_lo.min() - 0.5)), 0)
    r1 = min(int(math.ceil(y_hi.max() - 0.5)) + 1, height)
    if r0 >= r1:
        return out
    ys = np.arange(r0, r1, dtype=np.float64) + 0.5
    x0, y0, x1, y1 = (edges[:, i][None, :] for i in range(4))
    yc = ys[:, None]
    hit = ((y0 <= yc) & (yc < y1)) | ((y1 <= yc) & (yc < y0))
    with np.errstate(divide="ignore", invalid="ignore"):
        vt = (yc - y0) / (y1 - y0)
        xs = x0 + vt * (x1 - x0)
    rows, cols = np.nonzero(hit)
    # first column whose centre is NOT left of the crossing
    k = np.ceil(xs[rows, cols] - 0.5)
    k = np.clip(k, 0, width).astype(np.int64)
    counts = np.zeros((r1 - r0, width + 1), dtype=np.int64)
    np.add.at(counts, (rows, k), 1)
    # crossings strictly right of column c = sum over k > c
    right = np.cumsum(counts[:, ::-1], axis=1)[:, ::-1][:, 1:]
    out[r0:r1] = (right % 2) == 1
    return out


def rasterize(
    buildings: Sequence[tuple[Polygon, int]], width: int, height: int
) -> np.ndarray:
    """Paint ``(polygon, class)`` pairs into a mask; later entries win overlaps."""
    if width <= 0 or height <= 0:
        raise RasterError("mask dimensions must be positive")
    mask = np.zeros((height, width), dtype=np.uint8)
    for polygon, cls in buildings:
        if not 1 <= int(cls) <= MAX_CLASS:
            raise RasterError(f"class {cls} outside 1..{MAX_CLASS}")
        mask[polygon_coverage(polygon, width, height)] = int(cls)
    return mask


@dataclass(frozen=True)
class Component:
    label: int
    # (n, 2) array of (row, col), row-major order
    pixels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.pixels)


_EIGHT = np.ones((3, 3), dtype=bool)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 8-connected foreground; labels follow row-major first encounter."""
    mask = validate_mask(mask, binary=True)
    labeled, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return labeled, 0
    flat = labeled.ravel()
    nz = np.flatnonzero(flat)
    _, first = np.unique(flat[nz], return_index=True)
    order = np.argsort(nz[first])
    remap = np.zeros(n + 1, dtype=labeled.dtype)
    remap[order + 1] = np.arange(1, n + 1)
    return remap[labeled], n


def connected_components(mask: np.ndarray) -> list[Component]:
    labeled, n = label_components(mask)
    if n == 0:
        return []
    rows, cols = np.nonzero(labeled)
    labs = labeled[rows, cols]
    order = np.argsort(labs, kind="stable")
    rows, cols, labs = rows[order], cols[order], labs[order]
    splits = np.flatnonzero(np.diff(labs)) + 1
    return [
        Component(i + 1, np.stack([r, c], axis=1))
        for i, (r, c) in enumerate(zip(np.split(rows, splits), np.split(cols, splits)))
    ]


# direction vectors in (x, y); index order matters for turn ranking
_DIRS = ((1, 0), (0, 1), (-1, 0), (0, -1))


def _pixel_edges(pixels: set[tuple[int, int]]) -> dict[tuple[int, int], list[int]]:
    """Directed boundary edges keyed by start vertex, interior on the left.

    "Left" here is a +90 degree rotation in (x, y) coordinates, which makes
    exterior rings come out with positive shoelace area.
    """
    out: dict[tuple[int, int], list[int]] = {}
    for x, y in pixels:
        if (x, y - 1) not in pixels:
            out.setdefault((x, y), []).append(0)
        if (x + 1, y) not in pixels:
            out.setdefault((x + 1, y), []).append(1)
        if (x, y + 1) not in pixels:
            out.setdefault((x + 1, y + 1), []).append(2)
        if (x - 1, y) not in pixels:
            out.setdefault((x, y + 1), []).append(3)
    return out


def _turn(d: int, options) -> int:
    if len(options) == 1:
        return options[0]
    # pinch vertex: turning away from the interior keeps diagonal neighbours
    # in one ring (8-connectivity)
    right = (d - 1) % 4
    return right if right in options else options[0]


def _walk(edges, start: tuple[int, int], direction: int) -> list[tuple[int, int]]:
    """Follow one loop, consuming its edges, and return its corner vertices."""
    start_options = list(edges[start])
    corners = []
    v, d, prev = start, direction, None
    while True:
        edges[v].remove(d)
        if not edges[v]:
            del edges[v]
        if d != prev:
            corners.append(v)
        prev = d
        dx, dy = _DIRS[d]
        v = (v[0] + dx, v[1] + dy)
        if v == start and _turn(d, start_options) == direction:
            break
        d = _turn(d, edges[v])
    if len(corners) > 1 and prev == direction:
        corners.pop(0)
    return corners


def _canonical(ring: list[tuple[int, int]]) -> tuple[tuple[float, float], ...]:
    i = min(range(len(ring)), key=lambda j: (ring[j][1], ring[j][0]))
    rot = ring[i:] + ring[:i]
    return tuple((float(x), float(y)) for x, y in rot)


def trace_boundary(pixels) -> Polygon:
    """Trace the pixel-edge outline of an 8-connected set of ``(row, col)`` pixels.

    The exterior ring runs counter-clockwise (positive shoelace area in
    ``(x, y)``), starts at its top-left corner and contains only corner
    vertices. Enclosed background becomes clockwise hole rings, so
    re-rasterising the result reproduces the pixel set exactly.
    """
    pix = {(int(c), int(r)) for r, c in np.asarray(pixels).reshape(-1, 2)}
    if not pix:
        raise RasterError("cannot trace an empty pixel set")
    edges = _pixel_edges(pix)
    top = min(pix, key=lambda p: (p[1], p[0]))
    exterior = _walk(edges, top, 0)
    holes = []
    while edges:
        v = min(edges, key=lambda p: (p[1], p[0]))
        holes.append(_canonical(_walk(edges, v, edges[v][0])))
    return Polygon(_canonical(exterior), tuple(holes))


def majority_class(values: np.ndarray) -> int:
    """Most frequent nonzero value; ties go to the higher class. 0 if none."""
    counts = np.bincount(np.asarray(values, dtype=np.int64).ravel(), minlength=MAX_CLASS + 1)
    counts[0] = 0
    if counts.sum() == 0:
        return 0
    best = counts.max()
    return int(np.flatnonzero(counts == best)[-1])


def polygonize(mask: np.ndarray, min_area: int = 4) -> list[tuple[Polygon, int]]:
    """Vectorise a class mask into ``(polygon, class)`` pairs.

    Any nonzero pixel is foreground; components smaller than ``min_area``
    pixels are dropped; each polygon takes the majority class of its pixels.
    """
    mask = validate_mask(mask)
    out = []
    for comp in connected_components(mask > 0):
        if comp.size < min_area:
            continue
        cls = majority_class(mask[comp.pixels[:, 0], comp.pixels[:, 1]])
        out.append((trace_boundary(comp.pixels), cls))
    return out


@dataclass(frozen=True)
class CropSpec:
    padding_fraction: float = 0.1
    output_side: int = 64

    def __post_init__(self):
        if self.padding_fraction < 0:
            raise ValueError("padding_fraction must be >= 0")
        if self.output_side < 8:
            raise ValueError("output_side must be >= 8")


def crop_region(
    footprint: Polygon, width: int, height: int, padding_fraction: float
) -> tuple[int, int, int, int]:
    """Integer ``(x0, y0, x1, y1)`` crop window for a footprint, clamped to the image."""
    minx, miny, maxx, maxy = footprint.bounds()
    bx0, by0 = math.floor(minx), math.floor(miny)
    bx1, by1 = math.ceil(maxx), math.ceil(maxy)
    if bx1 <= bx0 or by1 <= by0:
        raise RasterError("footprint has a zero-area bounding box")
    # rounding guards against 0.1 * 30 = 3.0000000000000004 style products
    pad = math.ceil(round(padding_fraction * max(bx1 - bx0, by1 - by0), 9))
    x0, y0 = max(bx0 - pad, 0), max(by0 - pad, 0)
    x1, y1 = min(bx1 + pad, width), min(by1 + pad, height)
    if x1 <= x0 or y1 <= y0:
        raise RasterError("footprint lies outside the image")
    return x0, y0, x1, y1


def crop_building(image: np.ndarray, footprint: Polygon, spec: CropSpec = CropSpec()) -> np.ndarray:
    """Padded bounding-box crop of ``image`` (H, W, C) resized to the spec's side."""
    from .imaging import resize_bilinear

    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w = image.shape[:2]
    x0, y0, x1, y1 = crop_region(footprint, w, h, spec.padding_fraction)
    return resize_bilinear(image[y0:y1, x0:x1], spec.output_side, spec.output_side)


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise RasterError(f"{path}: expected a single-channel mask, got mode {im.mode}")
        arr = np.array(im)
    return validate_mask(arr.astype(np.uint8))


def write_mask(mask: np.ndarray, path: str | Path) -> None:
    mask = validate_mask(mask)
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path, format="PNG", compress_level=6)
