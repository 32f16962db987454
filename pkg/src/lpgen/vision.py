"""Classical image operations on unit-interval float images."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class Image:
    """Row-major H×W×C array of samples in [0, 1]; C is 1 or 3."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"image must be H×W×1 or H×W×3, got shape {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("image samples must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class EdgeMap:
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    def points(self) -> np.ndarray:
        """Edge pixels as an (n, 2) array of (x, y)."""
        ys, xs = np.nonzero(self.mask)
        return np.stack([xs, ys], axis=1).astype(np.float64)


@dataclass(frozen=True)
class Contour:
    points: list[tuple[int, int]]
    closed: bool


# -- codec ------------------------------------------------------------------

def load_png(path) -> Image:
    with PILImage.open(path) as im:
        im.load()
        mode = im.mode
        if mode not in ("L", "RGB"):
            im = im.convert("L" if mode in ("1", "I", "I;16", "F", "LA") else "RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return Image(arr)


def save_png(img: Image | EdgeMap, path) -> None:
    if isinstance(img, EdgeMap):
        arr = img.mask.astype(np.uint8) * 255
    else:
        arr = np.round(img.data * 255.0).astype(np.uint8)
        arr = arr[:, :, 0] if img.channels == 1 else arr
    PILImage.fromarray(arr).save(Path(path), format="PNG")


def load_edge_map(path) -> EdgeMap:
    img = load_png(path)
    return EdgeMap(grayscale(img) > 0.5)


# -- geometry -----------------------------------------------------------------

def resize_bilinear(img: Image, new_w: int, new_h: int) -> Image:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    if new_w <= 0 or new_h <= 0:
        raise ValueError(f"target size must be positive, got {new_w}×{new_h}")
    if (new_w, new_h) == (img.width, img.height):
        return Image(img.data.copy())
    y0, y1, fy = _sample_axis(img.height, new_h)
    x0, x1, fx = _sample_axis(img.width, new_w)
    d = img.data
    top = d[y0][:, x0] * (1 - fx)[None, :, None] + d[y0][:, x1] * fx[None, :, None]
    bot = d[y1][:, x0] * (1 - fx)[None, :, None] + d[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return Image(np.clip(out, 0.0, 1.0))


def _sample_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def crop(img: Image, x0: int, y0: int, w: int, h: int) -> Image:
    return Image(img.data[y0 : y0 + h, x0 : x0 + w].copy())


def center_crop(img: Image, s: int) -> Image:
    if s <= 0 or s > min(img.width, img.height):
        raise ValueError(f"crop size {s} does not fit a {img.width}×{img.height} image")
    return crop(img, (img.width - s) // 2, (img.height - s) // 2, s, s)


# -- photometric ---------------------------------------------------------------

def grayscale(img: Image) -> np.ndarray:
    if img.channels == 1:
        return img.data[:, :, 0]
    return img.data @ np.array([0.299, 0.587, 0.114])


def gaussian_kernel(size: int = 5, sigma: float = 1.4) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = ndimage.correlate(gray, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(gray, SOBEL_Y, mode="nearest")
    return gx, gy


def rgb_histogram(img: Image, bins_per_channel: int = 8) -> np.ndarray:
    """Joint RGB histogram with ``bins**3`` cells, L1-normalised."""
    if img.channels != 3:
        raise ValueError("rgb_histogram needs a 3-channel image")
    if bins_per_channel < 1:
        raise ValueError("bins_per_channel must be positive")
    b = bins_per_channel
    idx = np.minimum(np.floor(img.data * b).astype(np.int64), b - 1).reshape(-1, 3)
    flat = (idx[:, 0] * b + idx[:, 1]) * b + idx[:, 2]
    hist = np.bincount(flat, minlength=b**3).astype(np.float64)
    return hist / hist.sum()


# -- edges --------------------------------------------------------------------

def canny(img: Image, low: float = 0.1, high: float = 0.3, sigma: float = 1.4) -> EdgeMap:
    """Canny edge detector; thresholds are fractions of the peak gradient magnitude."""
    if img.width == 0 or img.height == 0:
        raise ValueError("canny needs a non-empty image")
    if not 0.0 < low < high <= 1.0:
        raise ValueError(f"thresholds must satisfy 0 < low < high <= 1, got {low}, {high}")
    gray = grayscale(img)
    gray = gray - gray.min()
    smooth = ndimage.correlate(gray, gaussian_kernel(5, sigma), mode="nearest")
    gx, gy = sobel(smooth)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12:
        return EdgeMap(np.zeros(gray.shape, dtype=bool))
    # compare magnitudes on a fixed relative grid so float noise cannot break ties
    mag = np.round(mag / peak, 9)
    thin = _non_max_suppress(mag, gx, gy)
    strong = thin >= high
    weak = thin >= low
    labels, n = ndimage.label(weak, structure=_EIGHT)
    if n == 0:
        return EdgeMap(np.zeros(gray.shape, dtype=bool))
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return EdgeMap(keep[labels])


# neighbour offsets (dy, dx) along the gradient for each quantised direction
_NMS_OFFSETS = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}


def _non_max_suppress(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    h, w = mag.shape
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    padded = np.pad(mag, 1)
    out = np.zeros_like(mag)
    for s, (dy, dx) in _NMS_OFFSETS.items():
        ahead = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        behind = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        # asymmetric tie rule keeps exactly one pixel of a two-pixel plateau
        keep = (sector == s) & (mag >= behind) & (mag > ahead)
        out[keep] = mag[keep]
    out[0, :] = out[-1, :] = 0.0
    out[:, 0] = out[:, -1] = 0.0
    return out


# -- contours -------------------------------------------------------------------

# clockwise ring starting west, in (dy, dx) with y pointing down
_RING = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]
_RING_INDEX = {d: i for i, d in enumerate(_RING)}


def trace_contours(em: EdgeMap) -> list[Contour]:
    """Outer boundary of every 8-connected component, largest first."""
    labels, n = ndimage.label(em.mask, structure=_EIGHT)
    if n == 0:
        return []
    contours = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = np.pad(labels[sl] == k, 1)
        ys, xs = np.nonzero(comp)
        start = (int(ys[0]), int(xs[0]))  # raster-first pixel: its west neighbour is empty
        oy, ox = sl[0].start - 1, sl[1].start - 1
        pts = [(x + ox, y + oy) for y, x in _moore_trace(comp, start)]
        contours.append(Contour(points=pts, closed=len(pts) >= 3 and len(set(pts)) == len(pts)))
    contours.sort(key=lambda c: -len(c.points))
    return contours


def _moore_trace(comp: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    pts = [start]
    cur, back = start, 0
    first = None
    limit = 4 * comp.size + 8
    while len(pts) < limit:
        nxt = None
        for k in range(1, 9):
            d = (back + k) % 8
            cand = (cur[0] + _RING[d][0], cur[1] + _RING[d][1])
            if comp[cand]:
                prev = _RING[(back + k - 1) % 8]
                nxt = cand
                nback = _RING_INDEX[(prev[0] - _RING[d][0], prev[1] - _RING[d][1])]
                break
        if nxt is None:
            break
        if first is None:
            first = nxt
        elif cur == start and nxt == first:
            break
        pts.append(nxt)
        cur, back = nxt, nback
    if len(pts) > 1 and pts[-1] == start:
        pts.pop()
    return pts
