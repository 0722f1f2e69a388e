"""Dataset registry, split roles, and synthetic sources for desk-scale runs.

Datasets are small enough to live in memory, so a loaded dataset is a single
:class:`SampleBatch`; iterate it in minibatches with :meth:`SampleBatch.batches`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

from .errors import ConfigurationError, IngestionError, LayoutError

ROLES = ("in-train", "in-test", "out-exposure", "out-val", "out-test")
IN_ROLES = ("in-train", "in-test")
OUT_ROLES = ("out-exposure", "out-val", "out-test")
DATA_ROOT_ENV = "ROBUST_OOD_DATA"


@dataclass
class SampleBatch:
    inputs: torch.Tensor
    labels: torch.Tensor | None = None
    role: str = "in-train"
    ids: list[str] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"{self.name}:{i}" for i in range(len(self.inputs))]
        if len(self.ids) != len(self.inputs):
            raise IngestionError(f"{len(self.ids)} ids for {len(self.inputs)} samples")
        if self.labels is not None and len(self.labels) != len(self.inputs):
            raise IngestionError(f"{len(self.labels)} labels for {len(self.inputs)} samples")

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "SampleBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        labels = None if self.labels is None else self.labels[idx]
        return SampleBatch(self.inputs[idx], labels, self.role, [self.ids[i] for i in idx.tolist()], self.name)

    def batches(self, batch_size: int, generator: torch.Generator | None = None,
                shuffle: bool = True) -> Iterator["SampleBatch"]:
        n = len(self)
        order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
        for i in range(0, n, batch_size):
            yield self.subset(order[i:i + batch_size])

    def to(self, dtype) -> "SampleBatch":
        return SampleBatch(self.inputs.to(dtype), self.labels, self.role, list(self.ids), self.name)


@dataclass
class DatasetSpec:
    name: str
    role: str
    source: str
    cap: int | None = None
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigurationError(f"unknown role {self.role!r}; expected one of {ROLES}", "role")
        if self.cap is not None and self.cap < 1:
            raise ConfigurationError("cap must be positive", "cap")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        known = {k: d.pop(k) for k in ("name", "role", "source", "cap", "seed") if k in d}
        params = d.pop("params", {})
        params.update(d)
        return cls(**known, params=params)


# a loader returns (inputs, labels or None, is_pixel_space)
SourceFn = Callable[[DatasetSpec], tuple]
_SOURCES: dict[str, SourceFn] = {}
_FETCHERS: dict[str, Callable[[Path], Path]] = {}


def register_source(name: str, fn: SourceFn | None = None):
    def deco(f):
        _SOURCES[name] = f
        return f
    return deco(fn) if fn is not None else deco


def register_fetcher(dataset_id: str, fn: Callable[[Path], Path]):
    """Hook for 'fetch:<id>' sources: ``fn(data_root)`` must return the path of a local .npz file."""
    _FETCHERS[dataset_id] = fn


def data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def _to_unit_range(x: np.ndarray, what: str) -> np.ndarray:
    if x.dtype == np.uint8:
        return x.astype(np.float32) / 255.0
    x = x.astype(np.float32)
    if not np.isfinite(x).all():
        raise IngestionError(f"{what}: non-finite pixel values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise IngestionError(f"{what}: pixel values outside [0, 1] (min {x.min():.4g}, max {x.max():.4g})")
    return x


def load_dataset(spec: DatasetSpec) -> SampleBatch:
    """Materialize a dataset deterministically from its spec."""
    source = spec.source
    if source.startswith("file:"):
        inputs, labels, pixel = _load_npz(Path(source[5:]), spec)
    elif source.startswith("fetch:"):
        key = source[6:]
        if key not in _FETCHERS:
            raise IngestionError(f"no fetcher registered for {key!r}")
        inputs, labels, pixel = _load_npz(_FETCHERS[key](data_root()), spec)
    elif source in _SOURCES:
        inputs, labels, pixel = _SOURCES[source](spec)
    else:
        raise IngestionError(f"unknown dataset source {source!r} (known: {sorted(_SOURCES)}, file:, fetch:)")
    inputs = np.asarray(inputs)
    if pixel:
        inputs = _to_unit_range(inputs, spec.name)
    expect = spec.params.get("shape")
    if expect is not None and tuple(inputs.shape[1:]) != tuple(expect):
        raise IngestionError(f"{spec.name}: sample shape {inputs.shape[1:]} != declared {tuple(expect)}")
    order = np.random.default_rng(spec.seed).permutation(len(inputs))
    if spec.cap is not None:
        order = order[:spec.cap]
    ids = [f"{spec.name}:{i}" for i in order.tolist()]
    x = torch.as_tensor(np.ascontiguousarray(inputs[order]), dtype=torch.float32)
    y = None if labels is None else torch.as_tensor(np.asarray(labels)[order], dtype=torch.long)
    return SampleBatch(x, y, spec.role, ids, spec.name)


def _load_npz(path: Path, spec: DatasetSpec):
    if not path.is_absolute():
        path = data_root() / path
    if not path.is_file():
        raise IngestionError(f"{spec.name}: file not found: {path}")
    with np.load(path) as f:
        if "x" not in f:
            raise IngestionError(f"{spec.name}: {path} lacks an 'x' array")
        x = f["x"]
        y = f["y"] if "y" in f else None
    return x, y, spec.params.get("pixel", True)


def check_role_disjoint(batches) -> None:
    """Raise if any sample id appears in both an in-role and an out-role set."""
    in_ids, out_ids = set(), set()
    for b in batches:
        (in_ids if b.role in IN_ROLES else out_ids).update(b.ids)
    both = in_ids & out_ids
    if both:
        raise IngestionError(f"{len(both)} sample ids are in both in- and out-roles, e.g. {sorted(both)[0]}")


# builtin image sources -------------------------------------------------------

_DIGITS_CACHE: dict = {}


def _digits():
    if "d" not in _DIGITS_CACHE:
        from sklearn.datasets import load_digits

        d = load_digits()
        _DIGITS_CACHE["d"] = ((d.images / 16.0).astype(np.float32)[:, None], d.target.astype(np.int64))
    return _DIGITS_CACHE["d"]


@register_source("digits")
def _digits_source(spec):
    """8x8 handwritten digits; params: classes (subset, relabelled 0..), split (train/test/all)."""
    x, y = _digits()
    classes = spec.params.get("classes")
    if classes is not None:
        keep = np.isin(y, classes)
        x, y = x[keep], y[keep]
        remap = {c: i for i, c in enumerate(classes)}
        y = np.array([remap[v] for v in y])
    split = spec.params.get("split", "all")
    perm = np.random.default_rng(12345).permutation(len(x))
    cut = int(0.8 * len(x))
    if split == "train":
        perm = perm[:cut]
    elif split == "test":
        perm = perm[cut:]
    elif split != "all":
        raise ConfigurationError(f"unknown split {split!r}", "split")
    perm = np.sort(perm)
    return x[perm], y[perm], True


@register_source("photo-patches")
def _photo_patches(spec):
    """Grayscale patches cut from the two bundled sample photographs, resized to ``size``."""
    from sklearn.datasets import load_sample_images

    size = int(spec.params.get("size", 8))
    n = int(spec.params.get("n", 1000))
    imgs = [im.mean(axis=2) / 255.0 for im in load_sample_images().images]
    rng = np.random.default_rng(spec.seed + 991)
    out = np.empty((n, 1, size, size), dtype=np.float32)
    patch = 4 * size
    for i in range(n):
        im = imgs[i % len(imgs)]
        r = rng.integers(0, im.shape[0] - patch)
        c = rng.integers(0, im.shape[1] - patch)
        p = im[r:r + patch, c:c + patch].reshape(size, 4, size, 4).mean(axis=(1, 3))
        lo, hi = p.min(), p.max()
        out[i, 0] = (p - lo) / (hi - lo) if hi > lo else 0.0
    return out, None, True


@register_source("uniform-noise")
def _uniform_noise(spec):
    shape = tuple(spec.params.get("shape", (1, 8, 8)))
    n = int(spec.params.get("n", 1000))
    rng = np.random.default_rng(spec.seed + 17)
    return rng.random((n, *shape), dtype=np.float32), None, True


@register_source("blobs")
def _blobs(spec):
    """Isotropic Gaussian blobs in the plane; params: n, centers, std."""
    n = int(spec.params.get("n", 1000))
    centers = np.asarray(spec.params.get("centers", [[-2.0, 0.0], [2.0, 0.0]]), dtype=np.float64)
    std = float(spec.params.get("std", 0.5))
    rng = np.random.default_rng(spec.seed)
    y = np.arange(n) % len(centers)
    x = centers[y] + std * rng.standard_normal((n, centers.shape[1]))
    return x.astype(np.float32), y, False


# toy layouts -----------------------------------------------------------------

Rect = tuple[float, float, float, float]   # (x0, y0, x1, y1)


def _overlap(a: Rect, b: Rect) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


@dataclass
class ToyLayout:
    """Axis-aligned rectangles in the plane; every in-rectangle is its own class."""

    in_rects: list[Rect]
    out_rects: list[Rect] = field(default_factory=list)
    name: str = "custom"

    def __post_init__(self):
        self.in_rects = [tuple(map(float, r)) for r in self.in_rects]
        self.out_rects = [tuple(map(float, r)) for r in self.out_rects]
        if not self.in_rects:
            raise LayoutError("a layout needs at least one in-rectangle")
        for r in self.in_rects + self.out_rects:
            if not (r[0] < r[2] and r[1] < r[3]):
                raise LayoutError(f"degenerate rectangle {r}")
        for a in self.in_rects:
            for b in self.out_rects:
                if _overlap(a, b):
                    raise LayoutError(f"in-rectangle {a} overlaps out-rectangle {b}")

    @property
    def num_classes(self) -> int:
        return len(self.in_rects)

    def bounds(self, pad: float = 2.0) -> Rect:
        rs = self.in_rects + self.out_rects
        return (min(r[0] for r in rs) - pad, min(r[1] for r in rs) - pad,
                max(r[2] for r in rs) + pad, max(r[3] for r in rs) + pad)

    def in_support(self, pts: torch.Tensor) -> torch.Tensor:
        return _inside_any(pts, self.in_rects)

    def out_support(self, pts: torch.Tensor) -> torch.Tensor:
        return _inside_any(pts, self.out_rects)

    def to_dict(self) -> dict:
        return {"name": self.name, "in_rects": [list(r) for r in self.in_rects],
                "out_rects": [list(r) for r in self.out_rects]}


def _inside_any(pts, rects):
    mask = torch.zeros(len(pts), dtype=torch.bool)
    for r in rects:
        mask |= (pts[:, 0] >= r[0]) & (pts[:, 0] <= r[2]) & (pts[:, 1] >= r[1]) & (pts[:, 1] <= r[3])
    return mask


LAYOUTS = {
    # two closed-set classes; open-set blocks sit between them and beside one of them,
    # closer than 2*eps at eps=1, while the remaining sides are free
    "fig4": ToyLayout(
        in_rects=[(-3.0, -1.0, -1.0, 1.0), (1.0, -1.0, 3.0, 1.0)],
        out_rects=[(-0.5, -1.0, 0.5, 1.0), (3.5, -1.0, 4.5, 1.0)],
        name="fig4",
    ),
    # four closed-set classes, no open set
    "fig8": ToyLayout(
        in_rects=[(-4.0, -4.0, -2.0, -2.0), (2.0, -4.0, 4.0, -2.0), (-4.0, 2.0, -2.0, 4.0), (2.0, 2.0, 4.0, 4.0)],
        out_rects=[],
        name="fig8",
    ),
}


def get_layout(layout) -> ToyLayout:
    if isinstance(layout, ToyLayout):
        return layout
    if isinstance(layout, dict):
        return ToyLayout(layout["in_rects"], layout.get("out_rects", []), layout.get("name", "custom"))
    if layout not in LAYOUTS:
        raise LayoutError(f"unknown layout {layout!r} (known: {sorted(LAYOUTS)})")
    return LAYOUTS[layout]


def sample_rects(rects, n: int, generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """``n`` points spread evenly over the rectangles, uniform within each; labels are rectangle indices."""
    labels = torch.arange(n) % len(rects)
    r = torch.tensor(rects, dtype=torch.float32)[labels]
    u = torch.rand(n, 2, generator=generator)
    pts = r[:, :2] + u * (r[:, 2:] - r[:, :2])
    return pts, labels


class GeneratedResampler:
    """Fresh uniform points over the layout frame, outside the closed-set rectangles."""

    def __init__(self, layout: ToyLayout, pad: float, seed: int):
        self.layout = layout
        self.box = layout.bounds(pad)
        self.generator = torch.Generator().manual_seed(seed)
        self.calls = 0

    def sample(self, n: int) -> torch.Tensor:
        self.calls += 1
        lo = torch.tensor(self.box[:2])
        span = torch.tensor(self.box[2:]) - lo
        out = []
        have = 0
        while have < n:
            pts = lo + torch.rand(2 * n, 2, generator=self.generator) * span
            pts = pts[~self.layout.in_support(pts)]
            out.append(pts)
            have += len(pts)
        return torch.cat(out)[:n]


@dataclass
class ToyDistributions:
    layout: ToyLayout
    in_points: torch.Tensor
    in_labels: torch.Tensor
    out_points: torch.Tensor
    resampler: GeneratedResampler

    def fresh(self, n_in: int, n_out: int, seed: int):
        """Independent draws from the same in/out regions (for test or validation sets)."""
        g = torch.Generator().manual_seed(seed)
        xi, yi = sample_rects(self.layout.in_rects, n_in, g)
        xo = sample_rects(self.layout.out_rects, n_out, g)[0] if self.layout.out_rects else torch.empty(0, 2)
        return xi, yi, xo


def make_toy_distributions(layout="fig4", n_in: int = 400, n_out: int = 200, seed: int = 0,
                           pad: float = 2.0) -> ToyDistributions:
    layout = get_layout(layout)
    g = torch.Generator().manual_seed(seed)
    xi, yi = sample_rects(layout.in_rects, n_in, g)
    if layout.out_rects:
        xo = sample_rects(layout.out_rects, n_out, g)[0]
    else:
        xo = torch.empty(0, 2)
    return ToyDistributions(layout, xi, yi, xo, GeneratedResampler(layout, pad, seed + 1))


def toy_splits(layout="fig4", n_train: int = 400, n_test: int = 400, seed: int = 0) -> dict[str, SampleBatch]:
    """All five roles drawn from a toy layout: closed set rectangles in, open set rectangles out."""
    layout = get_layout(layout)
    if not layout.out_rects:
        raise LayoutError("splitting needs at least one out-rectangle")
    g = torch.Generator().manual_seed(seed)
    out: dict[str, SampleBatch] = {}
    for role, n in (("in-train", n_train), ("in-test", n_test)):
        x, y = sample_rects(layout.in_rects, n, g)
        out[role] = SampleBatch(x, y, role, name=f"{layout.name}-{role}")
    for role, n in (("out-exposure", n_train // 2), ("out-val", n_test // 2), ("out-test", n_test)):
        x, _ = sample_rects(layout.out_rects, n, g)
        out[role] = SampleBatch(x, None, role, name=f"{layout.name}-{role}")
    return out


@register_source("toy")
def _toy_source(spec):
    """Points from a toy layout; params: layout, part ('in' or 'out'), n."""
    layout = get_layout(spec.params.get("layout", "fig4"))
    part = spec.params.get("part", "in" if spec.role in IN_ROLES else "out")
    n = int(spec.params.get("n", 400))
    g = torch.Generator().manual_seed(spec.seed)
    rects = layout.in_rects if part == "in" else layout.out_rects
    if not rects:
        raise IngestionError(f"layout {layout.name!r} has no {part}-rectangles")
    x, y = sample_rects(rects, n, g)
    return x.numpy(), (y.numpy() if part == "in" else None), False
