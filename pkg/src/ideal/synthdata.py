"""Seeded synthetic image datasets, pool partitions and the label oracle.

Each image is a smoothed-noise grey field with a fixed "anatomy" (a vertical
gradient and two darker fields). Positive classification images carry one
bright soft-edged ellipse in a task-specific quadrant; ``gland_seg`` images
carry several ellipses whose union is the segmentation mask, and their
image-level label is ``mask area fraction > 0.15``.

Hidden labels and masks are only reachable through :class:`Oracle`, which
counts every query.
"""
from __future__ import annotations

import json
import threading
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

TASKS = ("effusion_like", "pneumonia_like", "gland_seg")
VENDORS = ("A", "B")
GLAND_AREA_THRESHOLD = 0.15

# vendor B: sharper, cleaner acquisitions
VENDOR_CONTRAST = {"A": 1.0, "B": 1.4}
VENDOR_NOISE = {"A": 1.0, "B": 0.6}

# lesion centre boxes (row range, col range) as fractions of the side
LESION_BOX = {
    "effusion_like": ((0.55, 0.80), (0.20, 0.45)),
    "pneumonia_like": ((0.20, 0.45), (0.55, 0.80)),
}


class ParameterError(ValueError):
    """A DatasetSpec (or other configuration) field is out of range."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class DatasetSpec:
    n_images: int = 200
    size: int = 64
    positive_fraction: float = 0.5
    contrast: float = 0.25
    noise_sigma: float = 0.05
    vendor: str = "A"
    task: str = "effusion_like"
    seed: int = 0

    def validate(self):
        if int(self.n_images) != self.n_images or self.n_images < 1:
            raise ParameterError("n_images", f"must be a positive integer, got {self.n_images}")
        if int(self.size) != self.size or self.size < 16:
            raise ParameterError("size", f"must be an integer >= 16, got {self.size}")
        if self.size % 2:
            raise ParameterError("size", f"must be even, got {self.size}")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ParameterError("positive_fraction",
                                 f"must lie in (0, 1), got {self.positive_fraction}")
        if not 0.0 <= self.contrast <= 1.0:
            raise ParameterError("contrast", f"must lie in [0, 1], got {self.contrast}")
        if not 0.0 <= self.noise_sigma <= 0.5:
            raise ParameterError("noise_sigma", f"must lie in [0, 0.5], got {self.noise_sigma}")
        if self.vendor not in VENDORS:
            raise ParameterError("vendor", f"must be one of {VENDORS}, got {self.vendor!r}")
        if self.task not in TASKS:
            raise ParameterError("task", f"must be one of {TASKS}, got {self.task!r}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2 ** 64:
            raise ParameterError("seed", f"must be a 64-bit non-negative integer, got {self.seed}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(sorted(unknown)[0], "unknown DatasetSpec field")
        return cls(**d)


@dataclass(frozen=True)
class Image:
    id: str
    pixels: np.ndarray
    vendor: str


class Dataset:
    """Immutable collection of images with oracle-only labels and masks."""

    def __init__(self, ids, pixels, vendors, labels, masks=None, lesions=None, spec=None):
        self.ids = tuple(ids)
        px = np.array(pixels, dtype=float)
        px.setflags(write=False)
        self.pixels = px
        self.vendors = tuple(vendors)
        self.spec = spec
        self._labels = np.asarray(labels, dtype=int)
        self._masks = None
        if masks is not None:
            self._masks = np.asarray(masks, dtype=bool)
            self._masks.setflags(write=False)
        self._lesions = lesions
        self._index = {i: k for k, i in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise ValueError("duplicate image ids")

    def __len__(self):
        return len(self.ids)

    def __contains__(self, image_id):
        return image_id in self._index

    @property
    def size(self):
        return self.pixels.shape[1]

    @property
    def has_masks(self):
        return self._masks is not None

    def index(self, image_id):
        try:
            return self._index[image_id]
        except KeyError:
            raise KeyError(f"unknown image id {image_id!r}") from None

    def indices(self, ids):
        return np.array([self.index(i) for i in ids], dtype=int)

    def image(self, image_id):
        k = self.index(image_id)
        return Image(image_id, self.pixels[k], self.vendors[k])

    def images(self, ids):
        """Stacked pixel grids for ``ids`` (in the given order)."""
        return self.pixels[self.indices(ids)]

    def with_pixels(self, pixels):
        """Same ids and hidden fields, different pixels (e.g. after noise)."""
        return Dataset(self.ids, pixels, self.vendors, self._labels, self._masks,
                       self._lesions, self.spec)

    def positive_fraction(self):
        return float(self._labels.mean())


class Oracle:
    """Label/mask oracle with a thread-safe query counter."""

    def __init__(self, dataset):
        self._ds = dataset
        self._lock = threading.Lock()
        self.count = 0
        self.queried = []

    def _tick(self, image_id):
        with self._lock:
            self.count += 1
            self.queried.append(image_id)

    def label(self, image_id):
        k = self._ds.index(image_id)
        self._tick(image_id)
        return int(self._ds._labels[k])

    def labels(self, ids):
        return np.array([self.label(i) for i in ids], dtype=int)

    def mask(self, image_id):
        k = self._ds.index(image_id)
        if self._ds._masks is None:
            raise ValueError(f"no mask: dataset of {image_id!r} is not a segmentation dataset")
        self._tick(image_id)
        return self._ds._masks[k].copy()


def oracle_label(oracle, image_id):
    return oracle.label(image_id)


def oracle_mask(oracle, image_id):
    return oracle.mask(image_id)


# generation ----------------------------------------------------------------

def _ellipse(size, cy, cx, ry, rx, angle=0.0):
    """Normalised elliptical radius field (1.0 on the boundary)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.sqrt((u / rx) ** 2 + (v / ry) ** 2)


def _soft(r, edge):
    return 1.0 / (1.0 + np.exp(np.clip((r - 1.0) / edge, -50, 50)))


def _anatomy(size, rng):
    rows = np.linspace(0.0, 1.0, size)[:, None]
    base = 0.30 + 0.12 * rows + np.zeros((1, size))
    jit = rng.uniform(-0.03, 0.03, size=4)
    for side, dj in ((0.3, jit[0]), (0.7, jit[1])):
        r = _ellipse(size, size * (0.5 + jit[2]), size * (side + dj), size * 0.32, size * 0.15)
        base -= 0.08 * _soft(r, 0.15)
    return base


def _background(size, sigma, rng):
    # 3x3 box blur shrinks the std of white noise by 3
    white = rng.normal(0.0, 3.0 * sigma, size=(size, size))
    return ndimage.uniform_filter(white, size=3, mode="reflect")


def _lesion_geometry(spec, rng):
    (r0, r1), (c0, c1) = LESION_BOX[spec.task]
    s = spec.size
    return {
        "cy": float(rng.uniform(r0, r1) * s), "cx": float(rng.uniform(c0, c1) * s),
        "ry": float(rng.uniform(0.08, 0.16) * s), "rx": float(rng.uniform(0.08, 0.16) * s),
        "angle": float(rng.uniform(0, np.pi)),
        "strength": float(rng.uniform(0.4, 1.6)),
    }


def _glands(spec, positive, rng):
    s = spec.size
    lo, hi = (0.18, 0.35) if positive else (0.03, 0.12)
    target = rng.uniform(lo, hi)
    mask = np.zeros((s, s), dtype=bool)
    geoms = []
    for _ in range(40):
        g = {"cy": float(rng.uniform(0.15, 0.85) * s), "cx": float(rng.uniform(0.15, 0.85) * s),
             "ry": float(rng.uniform(0.08, 0.20) * s), "rx": float(rng.uniform(0.08, 0.20) * s),
             "angle": float(rng.uniform(0, np.pi)), "strength": float(rng.uniform(0.6, 1.4))}
        if not positive and geoms:
            # shrink so negatives stay below the threshold
            g["ry"] *= 0.7
            g["rx"] *= 0.7
        cand = mask | (_ellipse(s, g["cy"], g["cx"], g["ry"], g["rx"], g["angle"]) <= 1.0)
        if not positive and cand.mean() > GLAND_AREA_THRESHOLD - 0.02:
            if geoms:
                break
            continue
        mask = cand
        geoms.append(g)
        if mask.mean() >= target:
            break
    return mask, geoms


def generate_dataset(spec):
    """Build the dataset described by ``spec`` (a pure function of the spec)."""
    spec.validate()
    root = np.random.default_rng(spec.seed)
    n = spec.n_images
    n_pos = int(round(n * spec.positive_fraction))
    labels = np.zeros(n, dtype=int)
    labels[:n_pos] = 1
    root.shuffle(labels)
    child_seeds = root.integers(0, 2 ** 63, size=n)
    contrast = spec.contrast * VENDOR_CONTRAST[spec.vendor]
    sigma = spec.noise_sigma * VENDOR_NOISE[spec.vendor]
    size = spec.size
    pixels = np.empty((n, size, size))
    masks = np.zeros((n, size, size), dtype=bool) if spec.task == "gland_seg" else None
    lesions = []
    for k in range(n):
        rng = np.random.default_rng(child_seeds[k])
        img = _anatomy(size, rng) + _background(size, sigma, rng)
        geoms = []
        if spec.task == "gland_seg":
            m, geoms = _glands(spec, bool(labels[k]), rng)
            masks[k] = m
            labels[k] = int(m.mean() > GLAND_AREA_THRESHOLD)
        elif labels[k]:
            geoms = [_lesion_geometry(spec, rng)]
        for g in geoms:
            r = _ellipse(size, g["cy"], g["cx"], g["ry"], g["rx"], g["angle"])
            img = img + contrast * g["strength"] * _soft(r, 0.08)
        pixels[k] = np.clip(img, 0.0, 1.0)
        lesions.append(geoms)
    ids = [f"{spec.vendor}-{spec.seed}-{k:05d}" for k in range(n)]
    return Dataset(ids, pixels, [spec.vendor] * n, labels, masks, lesions, spec)


def lesion_mask(dataset, image_id, dilation=0):
    """Ground-truth lesion footprint for evaluation code (not counted as a query)."""
    k = dataset.index(image_id)
    size = dataset.size
    if dataset._masks is not None:
        m = dataset._masks[k].copy()
    else:
        m = np.zeros((size, size), dtype=bool)
        for g in (dataset._lesions or [[]] * len(dataset))[k]:
            m |= _ellipse(size, g["cy"], g["cx"], g["ry"], g["rx"], g["angle"]) <= 1.0
    if dilation > 0 and m.any():
        yy, xx = np.mgrid[-dilation:dilation + 1, -dilation:dilation + 1]
        m = ndimage.binary_dilation(m, structure=(yy ** 2 + xx ** 2) <= dilation ** 2)
    return m


def evaluation_labels(dataset, ids):
    """Hidden labels of validation/test ids for scoring models (not counted as queries)."""
    return dataset._labels[dataset.indices(ids)].copy()


def lesion_strength(dataset, image_id):
    """Sum of lesion amplitude factors (0 for lesion-free images); evaluation only."""
    geoms = (dataset._lesions or [[]] * len(dataset))[dataset.index(image_id)]
    return float(sum(g["strength"] for g in geoms))


def inject_noise(image, sigma, rng=None):
    """Add i.i.d. N(0, sigma^2) noise and clamp to [0, 1].

    Accepts an :class:`Image` (returns an Image) or a pixel array.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    px = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=float)
    if sigma == 0:
        out = px.copy()
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        out = np.clip(px + rng.normal(0.0, sigma, size=px.shape), 0.0, 1.0)
    if isinstance(image, Image):
        return replace(image, pixels=out)
    return out


# partitions ----------------------------------------------------------------

@dataclass
class PoolState:
    labeled: dict = field(default_factory=dict)
    unlabeled: list = field(default_factory=list)
    validation: tuple = ()
    test: tuple = ()

    def add_labeled(self, image_id, label):
        try:
            self.unlabeled.remove(image_id)
        except ValueError:
            raise KeyError(f"{image_id!r} is not in the unlabeled pool") from None
        self.labeled[image_id] = int(label)

    @property
    def pool_size(self):
        return len(self.labeled) + len(self.unlabeled)

    def check(self):
        sets = [set(self.labeled), set(self.unlabeled), set(self.validation), set(self.test)]
        sizes = [len(self.labeled), len(self.unlabeled), len(self.validation), len(self.test)]
        if [len(s) for s in sets] != sizes:
            raise AssertionError("duplicate ids inside a partition")
        if len(set().union(*sets)) != sum(sizes):
            raise AssertionError("partitions overlap")
        return True


def _largest_remainder(total, weights):
    raw = np.asarray(weights, dtype=float) * total
    base = np.floor(raw + 1e-12).astype(int)
    rem = raw - base
    for k in np.argsort(-rem, kind="stable")[: total - base.sum()]:
        base[k] += 1
    return base


def split(dataset, ratios=(0.70, 0.10, 0.20), seed=0):
    """Stratified train/validation/test partition; everything train starts unlabeled."""
    if len(dataset) < 10:
        raise ValueError(f"dataset has {len(dataset)} images; split needs at least 10")
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    labels = dataset._labels
    n_pos = int(labels.sum())
    sizes = _largest_remainder(n, ratios)
    pos = _largest_remainder(n_pos, sizes / n)
    pos = np.minimum(pos, sizes)
    pos_ids = [dataset.ids[k] for k in rng.permutation(np.flatnonzero(labels == 1))]
    neg_ids = [dataset.ids[k] for k in rng.permutation(np.flatnonzero(labels == 0))]
    parts = []
    pi = ni = 0
    for size_k, pos_k in zip(sizes, pos):
        chunk = pos_ids[pi:pi + pos_k] + neg_ids[ni:ni + size_k - pos_k]
        pi += pos_k
        ni += size_k - pos_k
        parts.append([chunk[j] for j in rng.permutation(len(chunk))])
    state = PoolState(unlabeled=parts[0], validation=tuple(parts[1]), test=tuple(parts[2]))
    state.check()
    return state


# PGM interchange -------------------------------------------------------------

def write_pgm(path, array):
    """8-bit binary (P5) PGM of a [0, 1] array."""
    a = np.asarray(array, dtype=float)
    q = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def read_pgm(path):
    """Read a P5 PGM; returns a uint8 array."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def export_dataset(dataset, out_dir, pool=None, redact_labels=True):
    """One PGM per image plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_of = {}
    if pool is not None:
        for i in list(pool.labeled) + list(pool.unlabeled):
            split_of[i] = "train"
        split_of.update({i: "validation" for i in pool.validation})
        split_of.update({i: "test" for i in pool.test})
    entries = []
    for k, image_id in enumerate(dataset.ids):
        write_pgm(out / f"{image_id}.pgm", dataset.pixels[k])
        entry = {"id": image_id, "vendor": dataset.vendors[k], "split": split_of.get(image_id),
                 "label": None if redact_labels else int(dataset._labels[k]),
                 "redacted": bool(redact_labels)}
        if dataset.has_masks and not redact_labels:
            write_pgm(out / f"{image_id}.mask.pgm", dataset._masks[k].astype(float))
            entry["mask"] = f"{image_id}.mask.pgm"
        entries.append(entry)
    manifest = {"spec": dataset.spec.to_dict() if dataset.spec else None, "images": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def import_dataset(in_dir):
    """Inverse of :func:`export_dataset` (pixels come back quantised to 1/255)."""
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    ids, px, vendors, labels, masks = [], [], [], [], []
    for e in manifest["images"]:
        ids.append(e["id"])
        px.append(read_pgm(src / f"{e['id']}.pgm") / 255.0)
        vendors.append(e["vendor"])
        labels.append(-1 if e.get("label") is None else e["label"])
        if "mask" in e:
            masks.append(read_pgm(src / e["mask"]) > 127)
    if any(lbl < 0 for lbl in labels):
        warnings.warn("labels are redacted in this export; oracle queries will return -1")
    spec = DatasetSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None
    return Dataset(ids, np.stack(px), vendors, labels, np.stack(masks) if masks else None,
                   None, spec)
