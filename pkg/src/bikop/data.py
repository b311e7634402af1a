"""Procedural compositional image dataset and N-way K-shot episode sampling.

Each class is a (shape, palette) pair. Its two-token name is
``[shape token, palette token]``, so classes that share a shape or palette
share a name token. Base, validation and novel splits are disjoint in
classes, but every val/novel shape and palette also occurs in some base
class.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._seeding import derive_rng

SHAPE_NAMES = ("disk", "square", "triangle", "ring", "cross", "diamond", "hbars", "vbars")

# foreground rgb per palette; backgrounds are drawn per image
PALETTES = (
    (0.90, 0.15, 0.15),
    (0.15, 0.80, 0.20),
    (0.20, 0.30, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.20, 0.85),
    (0.10, 0.85, 0.85),
)

SPLITS = ("base", "val", "novel")
DISTRACTOR_PROB = 0.7

DATASET_MAGIC = b"BKDS"
DATASET_VERSION = 1


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    n_base: int = 20
    n_val: int = 5
    n_novel: int = 10
    images_per_class: int = 200
    shape_vocab: tuple[int, ...] = tuple(range(len(SHAPE_NAMES)))
    palette_vocab: tuple[int, ...] = tuple(range(len(PALETTES)))
    master_seed: int = 0

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ValueError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.channels != 3:
            raise ValueError("only 3-channel rendering is supported")
        for name in ("n_base", "n_val", "n_novel", "images_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        bad = [s for s in self.shape_vocab if not 0 <= s < len(SHAPE_NAMES)]
        bad += [p for p in self.palette_vocab if not 0 <= p < len(PALETTES)]
        if bad or len(set(self.shape_vocab)) != len(self.shape_vocab) or len(
            set(self.palette_vocab)
        ) != len(self.palette_vocab):
            raise ValueError("shape_vocab/palette_vocab must be distinct known generator ids")
        total = self.n_base + self.n_val + self.n_novel
        combos = len(self.shape_vocab) * len(self.palette_vocab)
        if total > combos:
            raise ValueError(
                f"{total} classes requested but only {combos} shape x palette combinations exist"
            )


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    shape: int
    palette: int
    name_tokens: tuple[int, ...]

    @property
    def name(self) -> str:
        return f"{SHAPE_NAMES[self.shape]}-{self.palette}"


@dataclass
class Dataset:
    config: DataConfig
    classes: tuple[ClassSpec, ...]
    splits: dict[str, tuple[int, ...]]
    images: np.ndarray  # (n, H, W, C) uint8, class-major
    labels: np.ndarray  # (n,) class id per image
    _index: dict[int, np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self._index = {
            spec.class_id: np.flatnonzero(self.labels == spec.class_id) for spec in self.classes
        }

    @property
    def vocab_size(self) -> int:
        return len(self.config.shape_vocab) + len(self.config.palette_vocab)

    def class_indices(self, class_id: int) -> np.ndarray:
        try:
            return self._index[class_id]
        except KeyError:
            raise KeyError(f"unknown class_id {class_id}") from None

    def class_name_tokens(self, class_id: int) -> tuple[int, ...]:
        return class_name_tokens(self, class_id)

    def split_images(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        ids = np.concatenate([self.class_indices(c) for c in self.splits[split]])
        return self.images[ids], self.labels[ids]


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task. Support is label-major: K images of label 0, then label 1, ..."""

    support_images: np.ndarray
    support_labels: np.ndarray
    support_ids: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    query_ids: np.ndarray
    class_ids: tuple[int, ...]
    name_tokens: tuple[tuple[int, ...], ...]
    slot_assignment: tuple[int, ...]
    n_way: int
    k_shot: int
    n_query: int

    @property
    def support_class_ids(self) -> np.ndarray:
        return np.asarray(self.class_ids)[self.support_labels]

    def digest(self) -> str:
        h = hashlib.sha1()
        for arr in (self.support_ids, self.query_ids, np.asarray(self.class_ids)):
            h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        return h.hexdigest()


def class_name_tokens(dataset: Dataset, class_id: int) -> tuple[int, ...]:
    for spec in dataset.classes:
        if spec.class_id == class_id:
            return spec.name_tokens
    raise KeyError(f"unknown class_id {class_id}")


def _assign_classes(config: DataConfig) -> tuple[tuple[ClassSpec, ...], dict[str, tuple[int, ...]]]:
    combos = list(itertools.product(config.shape_vocab, config.palette_vocab))
    total = config.n_base + config.n_val + config.n_novel
    rng = derive_rng(config.master_seed, "split")
    chosen = None
    for _ in range(1000):
        perm = rng.permutation(len(combos))
        cand = [combos[i] for i in perm[:total]]
        base = cand[: config.n_base]
        shapes = {s for s, _ in base}
        palettes = {p for _, p in base}
        if all(s in shapes and p in palettes for s, p in cand[config.n_base :]):
            chosen = cand
            break
    if chosen is None:
        chosen = cand
    n_shapes = len(config.shape_vocab)
    classes = tuple(
        ClassSpec(
            class_id=i,
            shape=s,
            palette=p,
            name_tokens=(config.shape_vocab.index(s), n_shapes + config.palette_vocab.index(p)),
        )
        for i, (s, p) in enumerate(chosen)
    )
    b, v = config.n_base, config.n_base + config.n_val
    splits = {
        "base": tuple(range(0, b)),
        "val": tuple(range(b, v)),
        "novel": tuple(range(v, total)),
    }
    return classes, splits


def _shape_mask(shape: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    name = SHAPE_NAMES[shape]
    if name == "disk":
        return u**2 + v**2 <= 1.0
    if name == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8
    if name == "triangle":
        return (v >= -0.9) & (v <= 0.8) & (np.abs(u) <= (v + 0.9) * 0.55)
    if name == "ring":
        r = np.sqrt(u**2 + v**2)
        return (r >= 0.55) & (r <= 1.0)
    if name == "cross":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 0.95)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 0.95))
    if name == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if name == "hbars":
        return (np.abs(u) <= 0.95) & ((np.abs(v - 0.45) <= 0.22) | (np.abs(v + 0.45) <= 0.22))
    if name == "vbars":
        return (np.abs(v) <= 0.95) & ((np.abs(u - 0.45) <= 0.22) | (np.abs(u + 0.45) <= 0.22))
    raise ValueError(f"unknown shape {shape}")


def render_image(spec: ClassSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one jittered instance of ``spec`` as a ``(size, size, 3)`` uint8 array.

    With probability ``DISTRACTOR_PROB`` a second, same-sized object of random
    shape and colour is drawn in another corner.
    """
    fg = np.asarray(PALETTES[spec.palette])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    # background: random dark tint plus blocky low-frequency texture
    bg = rng.uniform(0.05, 0.35, size=3)
    coarse = rng.normal(0.0, 0.12, size=(4, 4, 3))
    texture = np.kron(coarse, np.ones((size // 4, size // 4, 1)))
    img = bg + texture + rng.normal(0.0, 0.04, size=(size, size, 3))

    def centre(corner):
        cy = size * (0.3 if corner < 2 else 0.7) + rng.uniform(-2.5, 2.5)
        cx = size * (0.3 if corner % 2 == 0 else 0.7) + rng.uniform(-2.5, 2.5)
        return cy, cx

    def draw(shape, color, cy, cx, radius):
        theta = rng.uniform(-0.4, 0.4)
        dy, dx = (yy - cy) / radius, (xx - cx) / radius
        u = np.cos(theta) * dx + np.sin(theta) * dy
        v = -np.sin(theta) * dx + np.cos(theta) * dy
        color = np.clip(color * rng.uniform(0.6, 1.2) + rng.normal(0.0, 0.06, size=3), 0.0, 1.0)
        img[_shape_mask(shape, u, v)] = color

    if rng.random() < DISTRACTOR_PROB:
        corners = rng.permutation(4)[:2]
        d_shape = int(rng.integers(len(SHAPE_NAMES)))
        d_color = np.asarray(PALETTES[int(rng.integers(len(PALETTES)))])
        draw(d_shape, d_color, *centre(corners[1]), rng.uniform(0.12, 0.17) * size)
        draw(spec.shape, fg, *centre(corners[0]), rng.uniform(0.17, 0.23) * size)
    else:
        cy, cx = size / 2 + rng.uniform(-0.19, 0.19, size=2) * size
        draw(spec.shape, fg, cy, cx, rng.uniform(0.22, 0.34) * size)

    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def generate_dataset(config: DataConfig | None = None) -> Dataset:
    config = config or DataConfig()
    config.validate()
    classes, splits = _assign_classes(config)
    n = config.images_per_class
    size = config.image_size
    images = np.empty((len(classes) * n, size, size, config.channels), dtype=np.uint8)
    for spec in classes:
        for i in range(n):
            rng = derive_rng(config.master_seed, "render", spec.class_id * n + i)
            images[spec.class_id * n + i] = render_image(spec, size, rng)
    labels = np.repeat(np.arange(len(classes), dtype=np.int64), n)
    return Dataset(config=config, classes=classes, splits=splits, images=images, labels=labels)


def sample_episode(
    dataset: Dataset,
    split: str,
    n_way: int,
    k_shot: int,
    n_query: int,
    rng: np.random.Generator,
) -> Episode:
    if split not in dataset.splits:
        raise KeyError(f"unknown split {split!r}")
    if min(n_way, k_shot, n_query) < 1:
        raise ValueError("n_way, k_shot and n_query must all be >= 1")
    pool = dataset.splits[split]
    if len(pool) < n_way:
        raise InsufficientDataError(
            f"split {split!r} has {len(pool)} classes, episode needs {n_way}"
        )
    class_ids = tuple(int(c) for c in rng.choice(np.asarray(pool), size=n_way, replace=False))
    support, query = [], []
    for cid in class_ids:
        idx = dataset.class_indices(cid)
        if len(idx) < k_shot + n_query:
            raise InsufficientDataError(
                f"class {cid} has {len(idx)} images, episode needs {k_shot + n_query}"
            )
        pick = rng.choice(idx, size=k_shot + n_query, replace=False)
        support.append(pick[:k_shot])
        query.append(pick[k_shot:])
    support_ids = np.concatenate(support)
    query_ids = np.concatenate(query)
    return Episode(
        support_images=dataset.images[support_ids],
        support_labels=np.repeat(np.arange(n_way), k_shot),
        support_ids=support_ids,
        query_images=dataset.images[query_ids],
        query_labels=np.repeat(np.arange(n_way), n_query),
        query_ids=query_ids,
        class_ids=class_ids,
        name_tokens=tuple(class_name_tokens(dataset, c) for c in class_ids),
        slot_assignment=tuple(range(n_way)),
        n_way=n_way,
        k_shot=k_shot,
        n_query=n_query,
    )


def episode_stream(dataset: Dataset, split: str, n_way: int, k_shot: int, n_query: int,
                   seed: int, tag: str, count: int, start: int = 0):
    """Yield ``count`` episodes; episode ``i`` is drawn from the stream ``(seed, tag, i)``."""
    for i in range(start, start + count):
        yield sample_episode(dataset, split, n_way, k_shot, n_query, derive_rng(seed, tag, i))


# -- persistence ---------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIII")


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, h, w, c = dataset.images.shape
    blob = (
        _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, h, w, c)
        + dataset.labels.astype("<i4").tobytes()
        + np.ascontiguousarray(dataset.images).tobytes()
    )
    (directory / "images.bin").write_bytes(blob)
    cfg = asdict(dataset.config)
    manifest = {
        "format": "bikop-dataset",
        "version": DATASET_VERSION,
        "config": cfg,
        "classes": [asdict(s) for s in dataset.classes],
        "splits": {k: list(v) for k, v in dataset.splits.items()},
        "images_sha256": hashlib.sha256(blob).hexdigest(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('version')}")
    blob = (directory / "images.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["images_sha256"]:
        raise ValueError("images.bin does not match manifest checksum")
    magic, version, n, h, w, c = _HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC or version != DATASET_VERSION:
        raise ValueError("bad images.bin header")
    off = _HEADER.size
    labels = np.frombuffer(blob, dtype="<i4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    images = np.frombuffer(blob, dtype=np.uint8, count=n * h * w * c, offset=off)
    cfg = manifest["config"]
    cfg["shape_vocab"] = tuple(cfg["shape_vocab"])
    cfg["palette_vocab"] = tuple(cfg["palette_vocab"])
    classes = tuple(
        ClassSpec(**{**s, "name_tokens": tuple(s["name_tokens"])}) for s in manifest["classes"]
    )
    return Dataset(
        config=DataConfig(**cfg),
        classes=classes,
        splits={k: tuple(v) for k, v in manifest["splits"].items()},
        images=images.reshape(n, h, w, c).copy(),
        labels=labels,
    )
