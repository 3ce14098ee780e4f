"""Image loading, CIELAB conversion and SLIC superpixels."""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from PIL import Image as PILImage

# Colour distances are measured on a 0-100 scale (the native CIELAB lightness
# range) so that ``compactness`` keeps its usual meaning for inputs in [0, 1].
COLOR_SCALE = 100.0

# Above this many pixel/centre pairs the assignment step switches from a dense
# distance table to per-centre windows.
_DENSE_LIMIT = 50_000

IDX_UBYTE = 0x08


class CorruptImage(ValueError):
    """Raised when an image file cannot be decoded."""


@dataclass(frozen=True, eq=False)
class Image:
    """Row-major image with intensities in [0, 1], shape ``(height, width, channels)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"unsupported image shape {data.shape}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("intensities must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel superpixel ids, contiguous from 0."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError("label map must be two dimensional")
        object.__setattr__(self, "labels", labels.astype(np.int64, copy=False))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def n_segments(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def __eq__(self, other):
        return isinstance(other, LabelMap) and np.array_equal(self.labels, other.labels)

    def to_pgm(self) -> str:
        """Plain-text PGM (P2) rendering, used for golden files."""
        maxval = max(self.n_segments - 1, 1)
        lines = ["P2", f"{self.width} {self.height}", str(maxval)]
        lines += [" ".join(str(v) for v in row) for row in self.labels]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_pgm(cls, text: str) -> "LabelMap":
        tokens = [t for line in text.splitlines() for t in line.split("#", 1)[0].split()]
        if not tokens or tokens[0] != "P2":
            raise ValueError("not a plain PGM label map")
        w, h = int(tokens[1]), int(tokens[2])
        values = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
        if values.size != w * h:
            raise ValueError(f"expected {w * h} labels, found {values.size}")
        return cls(values.reshape(h, w))


@dataclass(frozen=True)
class SuperpixelStats:
    label: int
    mean_color: tuple[float, ...]
    centroid: tuple[float, float]
    pixel_count: int


# ---------------------------------------------------------------- loading


def _read_idx_image(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise CorruptImage("IDX header truncated")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != IDX_UBYTE or ndim not in (2, 3):
        raise CorruptImage("not an unsigned-byte IDX image")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise CorruptImage("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    if ndim == 3:
        if dims[0] != 1:
            raise CorruptImage(f"IDX file holds {dims[0]} images, expected one")
        dims = dims[1:]
    n = dims[0] * dims[1]
    body = raw[header:]
    if len(body) != n:
        raise CorruptImage(f"IDX payload has {len(body)} bytes, expected {n}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_image(path) -> Image:
    """Load a PNG (or other Pillow-readable) image or a single-image IDX buffer."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CorruptImage(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x00\x00":
        pixels = _read_idx_image(raw)
        return Image(pixels.astype(np.float64) / 255.0)
    try:
        with PILImage.open(io.BytesIO(raw)) as im:
            im.load()
            if im.mode.startswith("I"):
                return Image(np.clip(np.asarray(im, dtype=np.float64) / 65535.0, 0.0, 1.0))
            if im.mode in ("1", "L", "LA"):
                return Image(np.asarray(im.convert("L"), dtype=np.float64) / 255.0)
            if im.mode in ("RGB", "RGBA", "P", "CMYK", "YCbCr"):
                return Image(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)
            mode = im.mode
    except Exception as exc:  # Pillow raises a zoo of exception types
        raise CorruptImage(f"cannot decode {path}: {exc}") from exc
    raise CorruptImage(f"unsupported image mode {mode!r} in {path}")


def save_image(img: Image | np.ndarray, path) -> None:
    data = img.data if isinstance(img, Image) else np.asarray(img)
    arr = np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    PILImage.fromarray(arr).save(path, format="PNG")


# ---------------------------------------------------------------- colour


_RGB_TO_XYZ = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
# Reference white taken as the image of RGB white, so greys land on a = b = 0.
_WHITE = _RGB_TO_XYZ.sum(axis=1)


def _lab_f(t: np.ndarray) -> np.ndarray:
    delta = 6.0 / 29.0
    return np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)


def rgb_to_lab(img: Image) -> Image:
    """sRGB to CIELAB, rescaled so L, a and b all lie in [0, 1].

    L is divided by 100; a and b are mapped by ``(v + 128) / 256`` so the
    neutral axis sits at 0.5. Grayscale images pass through unchanged.
    """
    if img.channels == 1:
        return img
    rgb = img.data
    linear = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    xyz = linear @ _RGB_TO_XYZ.T / _WHITE
    fx, fy, fz = (_lab_f(xyz[..., i]) for i in range(3))
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    lab = np.stack([L / 100.0, (a + 128.0) / 256.0, (b + 128.0) / 256.0], axis=-1)
    return Image(np.clip(lab, 0.0, 1.0))


# ---------------------------------------------------------------- SLIC


def grid_shape(height: int, width: int, n_segments: int) -> tuple[int, int]:
    """Rows and columns of the initial centre grid for ``n_segments`` cells."""
    rows = max(1, int(math.floor(math.sqrt(n_segments * height / width) + 0.5)))
    rows = min(rows, height)
    cols = max(1, int(math.floor(n_segments / rows + 0.5)))
    return rows, min(cols, width)


def _gradient_magnitude(feat: np.ndarray) -> np.ndarray:
    padded = np.pad(feat, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    dx = padded[1:-1, 2:] - padded[1:-1, :-2]
    return (dy**2).sum(axis=2) + (dx**2).sum(axis=2)


def _initial_centers(feat: np.ndarray, n_segments: int) -> np.ndarray:
    h, w, _ = feat.shape
    rows, cols = grid_shape(h, w, n_segments)
    ys = np.floor((np.arange(rows) + 0.5) * h / rows).astype(int)
    xs = np.floor((np.arange(cols) + 0.5) * w / cols).astype(int)
    grad = _gradient_magnitude(feat)
    offsets = [(0, 0)] + [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    centers = []
    for y in ys:
        for x in xs:
            best = (y, x)
            best_g = grad[y, x]
            for dy, dx in offsets[1:]:
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and grad[yy, xx] < best_g:
                    best, best_g = (yy, xx), grad[yy, xx]
            centers.append(np.concatenate([feat[best], [best[0], best[1]]]))
    return np.array(centers, dtype=np.float64)


def _assign_dense(feat, yy, xx, centers, step, ratio):
    c = feat.shape[1]
    dc2 = np.zeros((feat.shape[0], centers.shape[0]))
    for ch in range(c):
        dc2 += (feat[:, ch, None] - centers[None, :, ch]) ** 2
    dy = yy[:, None] - centers[None, :, c]
    dx = xx[:, None] - centers[None, :, c + 1]
    d2 = dc2 + (dy**2 + dx**2) * ratio
    inside = (np.abs(dy) <= step) & (np.abs(dx) <= step)
    masked = np.where(inside, d2, np.inf)
    labels = masked.argmin(axis=1)
    orphan = ~inside.any(axis=1)
    if orphan.any():
        labels[orphan] = d2[orphan].argmin(axis=1)
    return labels


def _assign_windowed(feat_img, centers, step, ratio):
    h, w, c = feat_img.shape
    best = np.full((h, w), np.inf)
    labels = np.full((h, w), -1, dtype=np.int64)
    for k, center in enumerate(centers):
        cy, cx = center[c], center[c + 1]
        y0, y1 = max(0, math.ceil(cy - step)), min(h - 1, math.floor(cy + step))
        x0, x1 = max(0, math.ceil(cx - step)), min(w - 1, math.floor(cx + step))
        if y0 > y1 or x0 > x1:
            continue
        win = feat_img[y0 : y1 + 1, x0 : x1 + 1]
        dc2 = np.zeros(win.shape[:2])
        for ch in range(c):
            dc2 += (win[:, :, ch] - center[ch]) ** 2
        dy = np.arange(y0, y1 + 1, dtype=np.float64)[:, None] - cy
        dx = np.arange(x0, x1 + 1, dtype=np.float64)[None, :] - cx
        d2 = dc2 + (dy**2 + dx**2) * ratio
        region = best[y0 : y1 + 1, x0 : x1 + 1]
        better = d2 < region
        region[better] = d2[better]
        labels[y0 : y1 + 1, x0 : x1 + 1][better] = k
    labels = labels.ravel()
    orphan = np.flatnonzero(labels < 0)
    if orphan.size:
        yy, xx = np.divmod(orphan, w)
        sub = _assign_dense(feat_img.reshape(-1, c)[orphan], yy.astype(float), xx.astype(float),
                            centers, -1.0, ratio)
        labels[orphan] = sub
    return labels


def slic_features(img: Image) -> np.ndarray:
    """Per-pixel colour features on the distance scale used by :func:`slic`."""
    base = rgb_to_lab(img) if img.channels == 3 else img
    return base.data * COLOR_SCALE


def slic(
    img: Image,
    n_segments: int = 75,
    compactness: float = 10.0,
    max_iter: int = 10,
    *,
    enforce: bool = True,
    dense: bool | None = None,
    return_residuals: bool = False,
):
    """SLIC superpixels.

    Pixels are clustered in joint colour and position space with distance
    ``sqrt(dc**2 + (ds / S)**2 * m**2)``, grid interval ``S = sqrt(hw / k)``
    and ``m = compactness``. Each centre only competes for pixels inside its
    ``2S x 2S`` window. Connectivity is enforced afterwards unless
    ``enforce`` is false.

    Returns the label map, plus the per-iteration mean spatial centre shift
    when ``return_residuals`` is set.
    """
    h, w = img.height, img.width
    if n_segments < 1:
        raise ValueError("n_segments must be at least 1")
    if n_segments > h * w:
        raise ValueError(f"n_segments={n_segments} exceeds pixel count {h * w}")
    feat_img = slic_features(img)
    c = feat_img.shape[2]
    step = math.sqrt(h * w / n_segments)
    ratio = (compactness / step) ** 2
    centers = _initial_centers(feat_img, n_segments)
    k = centers.shape[0]
    if dense is None:
        dense = h * w * k <= _DENSE_LIMIT

    feat = feat_img.reshape(-1, c)
    yy, xx = np.divmod(np.arange(h * w), w)
    yy = yy.astype(np.float64)
    xx = xx.astype(np.float64)
    samples = np.concatenate([feat, yy[:, None], xx[:, None]], axis=1)

    residuals: list[float] = []
    labels = None
    for _ in range(max_iter):
        if dense:
            new = _assign_dense(feat, yy, xx, centers, step, ratio)
        else:
            new = _assign_windowed(feat_img, centers, step, ratio)
        counts = np.bincount(new, minlength=k)
        sums = np.stack([np.bincount(new, weights=samples[:, j], minlength=k) for j in range(c + 2)], axis=1)
        filled = counts > 0
        updated = centers.copy()
        updated[filled] = sums[filled] / counts[filled, None]
        shift = np.sqrt(((updated[:, c:] - centers[:, c:]) ** 2).sum(axis=1)).mean()
        residuals.append(float(shift))
        centers = updated
        converged = labels is not None and np.array_equal(new, labels)
        labels = new
        if converged:
            break

    lm = LabelMap(_relabel_sequential(labels).reshape(h, w))
    if enforce:
        lm = enforce_connectivity(lm, min_size=(h * w / n_segments) / 4.0)
    if return_residuals:
        return lm, residuals
    return lm


def _relabel_sequential(labels: np.ndarray) -> np.ndarray:
    _, inverse = np.unique(labels, return_inverse=True)
    return inverse.reshape(labels.shape)


# ---------------------------------------------------------------- connectivity


def _pixel_pairs(h: int, w: int, connectivity: int = 4):
    """Index pairs of neighbouring pixels (each unordered pair once)."""
    idx = np.arange(h * w).reshape(h, w)
    pairs = [
        (idx[:, :-1].ravel(), idx[:, 1:].ravel()),
        (idx[:-1, :].ravel(), idx[1:, :].ravel()),
    ]
    if connectivity == 8:
        pairs.append((idx[:-1, :-1].ravel(), idx[1:, 1:].ravel()))
        pairs.append((idx[:-1, 1:].ravel(), idx[1:, :-1].ravel()))
    a = np.concatenate([p[0] for p in pairs])
    b = np.concatenate([p[1] for p in pairs])
    return a, b


def connected_regions(labels: np.ndarray) -> tuple[int, np.ndarray]:
    """4-connected components of equal-label pixels."""
    h, w = labels.shape
    flat = labels.ravel()
    a, b = _pixel_pairs(h, w, 4)
    same = flat[a] == flat[b]
    graph = sp.coo_matrix((np.ones(same.sum(), dtype=np.int8), (a[same], b[same])), shape=(h * w, h * w))
    return connected_components(graph, directed=False)


def enforce_connectivity(lm: LabelMap, min_size: float | None = None) -> LabelMap:
    """Split labels into 4-connected regions and absorb small fragments.

    A region smaller than ``min_size`` pixels (default: a quarter of the mean
    segment area) joins its largest 4-adjacent region. Surviving regions are
    renumbered in order of (original label, first pixel), so a map that is
    already connected and free of small fragments comes back unchanged.
    """
    labels = lm.labels
    h, w = labels.shape
    if labels.size == 0:
        return lm
    if min_size is None:
        min_size = (h * w / max(lm.n_segments, 1)) / 4.0
    n_comp, comp = connected_regions(labels)
    flat = labels.ravel()
    size = np.bincount(comp, minlength=n_comp).astype(np.int64)
    _, first = np.unique(comp, return_index=True)
    orig = flat[first]

    a, b = _pixel_pairs(h, w, 4)
    ca, cb = comp[a], comp[b]
    diff = ca != cb
    neighbours: list[set[int]] = [set() for _ in range(n_comp)]
    for u, v in set(zip(ca[diff].tolist(), cb[diff].tolist())):
        neighbours[u].add(v)
        neighbours[v].add(u)

    parent = np.arange(n_comp)

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    order = np.argsort(first, kind="stable")
    changed = True
    while changed:
        changed = False
        for c in order.tolist():
            if find(c) != c or size[c] >= min_size:
                continue
            cand = {find(n) for n in neighbours[c]} - {c}
            if not cand:
                continue
            target = max(cand, key=lambda r: (size[r], -first[r]))
            parent[c] = target
            size[target] += size[c]
            neighbours[target] |= neighbours[c]
            neighbours[target].discard(c)
            changed = True

    roots = np.array([find(c) for c in range(n_comp)])
    keep = np.unique(roots)
    keys = np.lexsort((first[keep], orig[keep]))
    new_id = np.empty(n_comp, dtype=np.int64)
    new_id[keep[keys]] = np.arange(len(keep))
    return LabelMap(new_id[roots][comp].reshape(h, w))


# ---------------------------------------------------------------- statistics


def stats_arrays(img: Image, lm: LabelMap):
    """Vectorised per-label statistics: (counts, mean colours, centroids)."""
    if (img.height, img.width) != (lm.height, lm.width):
        raise ValueError(
            f"image is {img.height}x{img.width} but label map is {lm.height}x{lm.width}"
        )
    n = lm.n_segments
    flat = lm.labels.ravel()
    counts = np.bincount(flat, minlength=n)
    if (counts == 0).any():
        raise ValueError("label ids are not contiguous")
    colors = np.stack(
        [np.bincount(flat, weights=img.data[:, :, ch].ravel(), minlength=n) for ch in range(img.channels)],
        axis=1,
    ) / counts[:, None]
    yy, xx = np.divmod(np.arange(flat.size), lm.width)
    cy = np.bincount(flat, weights=yy + 0.5, minlength=n) / counts / lm.height
    cx = np.bincount(flat, weights=xx + 0.5, minlength=n) / counts / lm.width
    return counts, np.clip(colors, 0.0, 1.0), np.stack([cy, cx], axis=1)


def superpixel_stats(img: Image, lm: LabelMap) -> list[SuperpixelStats]:
    """Mean colour, normalised centroid and pixel count for every superpixel.

    Centroids use pixel centres, ``(index + 0.5) / size``, so they stay inside
    the open unit square.
    """
    counts, colors, centroids = stats_arrays(img, lm)
    return [
        SuperpixelStats(
            label=i,
            mean_color=tuple(float(v) for v in colors[i]),
            centroid=(float(centroids[i, 0]), float(centroids[i, 1])),
            pixel_count=int(counts[i]),
        )
        for i in range(len(counts))
    ]


def boundary_overlay(img: Image, lm: LabelMap, color=(1.0, 0.0, 0.0)) -> np.ndarray:
    """RGB copy of ``img`` with superpixel borders painted in ``color``."""
    rgb = np.repeat(img.data, 3, axis=2) if img.channels == 1 else img.data.copy()
    lab = lm.labels
    edge = np.zeros(lab.shape, dtype=bool)
    edge[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    edge[:-1, :] |= lab[:-1, :] != lab[1:, :]
    rgb[edge] = color
    return rgb
