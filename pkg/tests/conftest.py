import os
from collections import deque
from itertools import product
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stagnn.graph import Rag
from stagnn.segmentation import LabelMap

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

MNIST_DIR = Path(os.environ.get("STAGNN_MNIST_DIR", "/root/data/mnist"))


def random_graph(rng, n_min=5, n_max=10, p=0.4, dim=3) -> Rag:
    n = int(rng.integers(n_min, n_max + 1))
    iu = np.triu_indices(n, 1)
    keep = rng.random(len(iu[0])) < p
    edges = np.stack([iu[0][keep], iu[1][keep]], axis=1)
    return Rag(rng.random((n, dim)), edges)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference; zero when both vanish."""
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def mnist_paths(split="train"):
    prefix = "train" if split == "train" else "t10k"
    return MNIST_DIR / f"{prefix}-images-idx3-ubyte", MNIST_DIR / f"{prefix}-labels-idx1-ubyte"


needs_mnist = pytest.mark.skipif(not mnist_paths()[0].exists(), reason="MNIST IDX files not available")


def write_idx(path, arr: np.ndarray, magic: int):
    arr = np.asarray(arr, dtype=np.uint8)
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def flood_fill_connected(labels: np.ndarray) -> bool:
    """Independent audit: every label's pixels form one 4-connected set."""
    h, w = labels.shape
    seen = np.zeros_like(labels, dtype=bool)
    found = set()
    for r, c in product(range(h), range(w)):
        if seen[r, c]:
            continue
        lab = labels[r, c]
        if lab in found:
            return False
        found.add(lab)
        queue = deque([(r, c)])
        seen[r, c] = True
        while queue:
            y, x = queue.popleft()
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and not seen[ny, nx] and labels[ny, nx] == lab:
                    seen[ny, nx] = True
                    queue.append((ny, nx))
    return True


def is_partition(lm: LabelMap) -> bool:
    ids = np.unique(lm.labels)
    return ids[0] == 0 and ids[-1] == len(ids) - 1
