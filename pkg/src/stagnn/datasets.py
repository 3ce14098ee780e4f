"""MNIST loading, cached superpixel graphs, temporal directories and a synthetic change dataset."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .graph import Rag, SuperGraph, build_rag, build_supergraph, deserialize_graph, serialize_graph
from .segmentation import Image, load_image, save_image, slic, stats_arrays

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

TRANSITIONS = ("construction", "destruction", "cultivation", "de-cultivation", "no-change")
LAND_COVER = ("barren", "built-up", "crop")
DEFAULT_YEARS = (2011, 2013, 2017)


class DatasetError(ValueError):
    """Malformed or incomplete dataset on disk."""


@dataclass
class SampleRecord:
    """One sample: ``T`` frames (arrays or image paths) and a class id."""

    id: str
    frames: list
    label: int
    split: str | None = None
    frame_labels: tuple[str, ...] | None = None

    @property
    def n_frames(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------- MNIST


def _read_idx(path, magic: int, what: str) -> tuple[tuple[int, ...], np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated IDX header")
    found, = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DatasetError(f"{path}: magic {found} is not an IDX {what} file ({magic})")
    ndim = raw[3]
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header != size:
        raise DatasetError(f"{path}: expected {size} payload bytes, found {len(raw) - header}")
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    """``n x rows x cols`` uint8 array from an IDX3 image file."""
    _, arr = _read_idx(path, IDX_IMAGES_MAGIC, "image")
    return arr


def read_idx_labels(path) -> np.ndarray:
    _, arr = _read_idx(path, IDX_LABELS_MAGIC, "label")
    return arr


def load_mnist(images_path, labels_path, limit: int | None = None) -> list[SampleRecord]:
    """MNIST records with single float32 frames scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise DatasetError(f"{len(images)} images but {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    scaled = images.astype(np.float32) / 255.0
    stem = Path(images_path).name
    return [SampleRecord(f"{stem}:{i}", [scaled[i]], int(labels[i])) for i in range(len(labels))]


# ---------------------------------------------------------------- graphs and cache


@dataclass(frozen=True)
class SlicParams:
    n_segments: int = 75
    compactness: float = 10.0
    max_iter: int = 10
    connectivity: int = 8


def image_to_rag(img: Image, params: SlicParams = SlicParams()) -> Rag:
    """Segment an image and build its region adjacency graph."""
    lm = slic(img, params.n_segments, params.compactness, params.max_iter)
    _, colors, centroids = stats_arrays(img, lm)
    return build_rag(lm, features=np.hstack([colors, centroids]), connectivity=params.connectivity)


def default_cache_dir() -> Path | None:
    env = os.environ.get("STAGNN_CACHE_DIR")
    return Path(env) if env else None


def cache_key(img: Image, params: SlicParams) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(asdict(params), sort_keys=True).encode())
    h.update(str(img.data.shape).encode())
    h.update(np.ascontiguousarray(img.data).tobytes())
    return h.hexdigest()


def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cached_rag(img: Image, params: SlicParams = SlicParams(), cache_dir=None) -> Rag:
    """:func:`image_to_rag` memoised on disk under ``cache_dir`` (JSON interchange files)."""
    if cache_dir is None:
        return image_to_rag(img, params)
    key = cache_key(img, params)
    path = Path(cache_dir) / key[:2] / f"{key}.json"
    if path.exists():
        return deserialize_graph(path.read_bytes())
    g = image_to_rag(img, params)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, serialize_graph(g))
    return g


def _as_image(frame) -> Image:
    if isinstance(frame, Image):
        return frame
    if isinstance(frame, (str, Path)):
        return load_image(frame)
    return Image(np.asarray(frame, dtype=np.float64))


def _rag_job(args) -> Rag:
    frame, params, cache_dir = args
    return cached_rag(_as_image(frame), params, cache_dir)


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def mnist_to_graphs(records: Sequence[SampleRecord], params: SlicParams = SlicParams(), cache_dir=None,
                    workers: int = 1) -> list[Rag]:
    """One RAG per single-frame record; ``cache_dir`` defaults to ``$STAGNN_CACHE_DIR``."""
    cache_dir = cache_dir if cache_dir is not None else default_cache_dir()
    return _map(_rag_job, [(r.frames[0], params, cache_dir) for r in records], workers)


def records_to_supergraphs(records: Sequence[SampleRecord], params: SlicParams = SlicParams(), cache_dir=None,
                           workers: int = 1) -> list[SuperGraph]:
    """One supergraph per temporal record, frames in stored (chronological) order."""
    cache_dir = cache_dir if cache_dir is not None else default_cache_dir()
    lengths = {r.n_frames for r in records}
    if len(lengths) > 1:
        raise DatasetError(f"records disagree on frame count: {sorted(lengths)}")
    jobs = [(f, params, cache_dir) for r in records for f in r.frames]
    rags = _map(_rag_job, jobs, workers)
    T = lengths.pop() if lengths else 0
    return [build_supergraph(rags[i * T:(i + 1) * T]) for i in range(len(records))]


# ---------------------------------------------------------------- temporal directories


def read_labels_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"location", "label"} <= set(rows[0]):
        raise DatasetError(f"{path}: needs 'location' and 'label' columns")
    return rows


def load_temporal_dir(root, years: Sequence | None = None, classes: Sequence[str] | None = None) -> list[SampleRecord]:
    """Records for ``root/<location>/<year>.png`` with labels from ``root/labels.csv``.

    ``years`` fixes the frame order; by default it is read from the first
    location. Class ids follow ``classes``, then ``manifest.json``, then the
    sorted label names.
    """
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.exists():
        raise DatasetError(f"{root}: labels.csv not found")
    rows = {r["location"]: r for r in read_labels_csv(labels_path)}
    locations = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not locations:
        raise DatasetError(f"{root}: no location directories")
    if years is None:
        years = sorted(p.stem for p in (root / locations[0]).glob("*.png"))
    years = [str(y) for y in years]
    if classes is None:
        manifest = root / "manifest.json"
        if manifest.exists():
            classes = json.loads(manifest.read_text()).get("classes")
    if classes is None:
        classes = sorted({r["label"] for r in rows.values()})
    index = {c: i for i, c in enumerate(classes)}

    records = []
    for loc in locations:
        if loc not in rows:
            raise DatasetError(f"location {loc!r} has no entry in labels.csv")
        frames = []
        for y in years:
            p = root / loc / f"{y}.png"
            if not p.exists():
                raise DatasetError(f"location {loc!r} is missing the frame for {y}")
            frames.append(p)
        row = rows[loc]
        if row["label"] not in index:
            raise DatasetError(f"location {loc!r} has unknown label {row['label']!r}")
        fl = row.get("frame_labels")
        records.append(SampleRecord(
            loc, frames, index[row["label"]], split=row.get("split") or None,
            frame_labels=tuple(fl.split(";")) if fl else None,
        ))
    return records


# ---------------------------------------------------------------- synthetic change dataset


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic land-use transition dataset.

    Every tile mixes a static background cover with one change region in
    which the transition happens, so the dominant cover of a frame does not
    always move with the transition.
    """

    image_size: int = 64
    n_per_class: int = 400
    noise: float = 0.05
    seed: int = 0
    years: tuple[int, ...] = DEFAULT_YEARS
    classes: tuple[str, ...] = TRANSITIONS
    region_fraction: tuple[float, float] = (0.25, 0.75)

    def __post_init__(self):
        self.years = tuple(int(y) for y in self.years)
        self.classes = tuple(self.classes)
        if len(self.years) != 3:
            raise ValueError("the transition generator renders exactly three frames")
        if self.image_size < 16 or self.n_per_class < 1 or self.noise < 0:
            raise ValueError("image_size >= 16, n_per_class >= 1 and noise >= 0 are required")
        unknown = set(self.classes) - set(TRANSITIONS)
        if unknown:
            raise ValueError(f"unknown transition classes {sorted(unknown)}")


# Region cover in each of the three frames. "partial-*" frames carry the
# land-use label given after the colon.
_SCHEDULE = {
    "construction": ("barren", "partial-built:built-up", "built-up"),
    "destruction": ("built-up", "partial-built:built-up", "barren"),
    "cultivation": ("barren", "partial-crop:crop", "crop"),
    "de-cultivation": ("crop", "partial-crop:crop", "barren"),
}

_BARREN = np.array([0.66, 0.56, 0.42])
_CROP_A = np.array([0.30, 0.52, 0.22])
_CROP_B = np.array([0.25, 0.46, 0.185])
_ROOFS = np.array([[0.92, 0.92, 0.90], [0.82, 0.42, 0.36], [0.78, 0.80, 0.84], [0.55, 0.55, 0.58]])


def _smooth_noise(rng, size: int, cells: int) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells))
    return ndimage.zoom(coarse, size / cells, order=1)[:size, :size]


@dataclass
class _Scene:
    size: int
    background: str
    region: tuple[int, int, int, int]
    barren: np.ndarray
    stripes: np.ndarray
    roofs: list
    partial_keep: np.ndarray
    crop_mask_partial: np.ndarray


def _make_scene(rng, size: int, background: str, frac_range) -> _Scene:
    frac = rng.uniform(*frac_range)
    aspect = rng.uniform(0.6, 1.6)
    rh = int(np.clip(round(size * np.sqrt(frac * aspect)), 4, size))
    rw = int(np.clip(round(size * frac * size / rh), 4, size))
    r0 = int(rng.integers(0, size - rh + 1))
    c0 = int(rng.integers(0, size - rw + 1))

    # Texture sizes are set for a 64 pixel tile and scale with the render size.
    scale = size / 64.0
    barren = _BARREN[None, None, :] + 0.05 * _smooth_noise(rng, size, 6)[:, :, None]
    half = max(1, round((int(rng.integers(5, 10)) // 2 + 1) * scale))
    yy, xx = np.mgrid[:size, :size]
    along = (yy, xx, yy + xx, yy - xx)[int(rng.integers(0, 4))]
    stripes = np.where(((along // half) % 2 == 0)[:, :, None], _CROP_A, _CROP_B)

    roofs = []
    for _ in range(int(rng.integers(60, 80))):
        h = max(1, round(int(rng.integers(3, 9)) * scale))
        w = max(1, round(int(rng.integers(3, 9)) * scale))
        roofs.append((int(rng.integers(0, size - h)), int(rng.integers(0, size - w)), h, w,
                      _ROOFS[int(rng.integers(0, len(_ROOFS)))]))
    keep = rng.random(len(roofs)) < 0.4
    cut = rng.uniform(0.3, 0.7)
    split_rows = rng.random() < 0.5
    crop_partial = (yy < r0 + cut * rh) if split_rows else (xx < c0 + cut * rw)
    return _Scene(size, background, (r0, c0, rh, rw), barren, stripes, roofs, keep, crop_partial)


def _render_cover(scene: _Scene, cover: str) -> np.ndarray:
    img = scene.barren.copy()
    if cover in ("crop", "partial-crop"):
        mask = np.ones((scene.size, scene.size), bool) if cover == "crop" else scene.crop_mask_partial
        img[mask] = scene.stripes[mask]
    elif cover in ("built-up", "partial-built"):
        for k, (r, c, h, w, color) in enumerate(scene.roofs):
            if cover == "built-up" or scene.partial_keep[k]:
                img[r:r + h, c:c + w] = color
    return img


def _frame_label(background: str, cover: str, frac: float) -> str:
    region_label = cover.split(":")[-1]
    return region_label if frac >= 0.5 else background


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict:
    """Write PNG frames, ``labels.csv`` and ``manifest.json``; return the manifest.

    Per location a random gain, offset and colour cast are applied to all
    frames, and each frame adds its own small seasonal shift and pixel noise.
    Output bytes depend only on ``spec``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    rows = []
    for cls in spec.classes:
        for i in range(spec.n_per_class):
            loc = f"{cls}-{i:04d}"
            background = LAND_COVER[int(rng.integers(0, 3))]
            scene = _make_scene(rng, size, background, spec.region_fraction)
            if cls == "no-change":
                static = LAND_COVER[int(rng.integers(0, 3))]
                schedule = (static,) * 3
            else:
                schedule = _SCHEDULE[cls]
            r0, c0, rh, rw = scene.region
            frac = rh * rw / (size * size)
            bg = _render_cover(scene, background)
            gain = rng.uniform(0.85, 1.15)
            offset = rng.uniform(-0.05, 0.05)
            cast = rng.normal(0.0, 0.03, 3)
            (out / loc).mkdir(exist_ok=True)
            labels = []
            for year, cover in zip(spec.years, schedule):
                img = bg.copy()
                img[r0:r0 + rh, c0:c0 + rw] = _render_cover(scene, cover.split(":")[0])[r0:r0 + rh, c0:c0 + rw]
                season = rng.normal(0.0, 0.01) + rng.normal(0.0, 0.005, 3)
                img = img * gain + offset + cast + season + rng.normal(0.0, spec.noise, img.shape)
                save_image(np.clip(img, 0.0, 1.0), out / loc / f"{year}.png")
                labels.append(_frame_label(background, cover, frac))
            rows.append({"location": loc, "label": cls, "frame_labels": ";".join(labels)})

    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["location", "label", "frame_labels"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    manifest = {
        "spec": {**asdict(spec), "years": list(spec.years), "classes": list(spec.classes),
                 "region_fraction": list(spec.region_fraction)},
        "classes": list(spec.classes),
        "frame_classes": list(LAND_COVER),
        "years": list(spec.years),
        "records": [{"location": r["location"], "label": r["label"]} for r in rows],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
