"""Attribute schemas, datasets with missing labels, and a synthetic generator.

Missing labels are stored as ``-1`` in the integer label matrix of a
:class:`Dataset`; :class:`Sample` exposes them as ``None``.

Synthetic images bind each attribute to a disjoint horizontal band. Inside
band ``k`` a binary stripe pattern specific to attribute ``k`` is drawn with
an amplitude that encodes the class, everything else is zero, then Gaussian
noise is added. :func:`oracle_decode` reads the amplitudes back directly.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ValidationError

logger = logging.getLogger(__name__)

MISSING = -1


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    num_classes: int
    class_names: tuple

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"attribute {self.name!r} needs at least 2 classes")
        if len(self.class_names) != self.num_classes:
            raise ConfigurationError(f"attribute {self.name!r}: {len(self.class_names)} names "
                                     f"for {self.num_classes} classes")
        if len(set(self.class_names)) != self.num_classes:
            raise ConfigurationError(f"attribute {self.name!r} has duplicate class names")

    @classmethod
    def make(cls, name: str, num_classes: int, class_names: Optional[Sequence[str]] = None):
        if class_names is None:
            class_names = [f"{name.lower()}_{i}" for i in range(num_classes)]
        return cls(name, int(num_classes), tuple(class_names))

    def index(self, class_name: str) -> int:
        return self.class_names.index(class_name)


@dataclass(frozen=True)
class ArticleSchema:
    article: str
    attributes: tuple

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate attribute names in {self.article!r}")

    @classmethod
    def from_counts(cls, article: str, counts: dict) -> "ArticleSchema":
        return cls(article, tuple(AttributeSpec.make(n, c) for n, c in counts.items()))

    def __len__(self):
        return len(self.attributes)

    def __contains__(self, name):
        return any(a.name == name for a in self.attributes)

    def __getitem__(self, name) -> AttributeSpec:
        for a in self.attributes:
            if a.name == name:
                return a
        raise ConfigurationError(f"unknown attribute {name!r} for article {self.article!r}")

    def index(self, name: str) -> int:
        for i, a in enumerate(self.attributes):
            if a.name == name:
                return i
        raise ConfigurationError(f"unknown attribute {name!r} for article {self.article!r}")

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    @property
    def class_counts(self) -> list[int]:
        return [a.num_classes for a in self.attributes]

    @property
    def total_classes(self) -> int:
        return sum(self.class_counts)

    def slices(self) -> list[slice]:
        """Column ranges of each attribute inside the concatenated one-hot vector."""
        out, start = [], 0
        for c in self.class_counts:
            out.append(slice(start, start + c))
            start += c
        return out

    def subset(self, names: Sequence[str]) -> "ArticleSchema":
        return ArticleSchema(self.article, tuple(self[n] for n in names))

    def with_attribute(self, spec: AttributeSpec) -> "ArticleSchema":
        return ArticleSchema(self.article, self.attributes + (spec,))

    def to_dict(self) -> dict:
        return {"article": self.article,
                "attributes": [{"name": a.name, "classes": list(a.class_names)} for a in self.attributes]}

    @classmethod
    def from_dict(cls, d: dict) -> "ArticleSchema":
        return cls(d["article"], tuple(AttributeSpec.make(a["name"], len(a["classes"]), a["classes"])
                                       for a in d["attributes"]))


PRESET_COUNTS = {
    "dresses": {"Shape": 15, "Length": 4, "Hemline": 7, "SleeveStyle": 14, "Pattern": 19,
                "SleeveLength": 4, "Neck": 16},
    "tops": {"SleeveStyle": 18, "SleeveLength": 5, "Pattern": 18, "Neck": 14},
    "jeans": {"Fade": 3, "Shade": 4, "Distress": 5},
}


def preset(name: str) -> ArticleSchema:
    key = name.lower()
    if key not in PRESET_COUNTS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESET_COUNTS)}")
    return ArticleSchema.from_counts(key.capitalize(), PRESET_COUNTS[key])


@dataclass
class Sample:
    id: str
    features: np.ndarray
    labels: tuple  # Optional[int] per attribute


class Dataset:
    """Features stacked as ``N x C x H x W`` float32 and labels as ``N x n`` int."""

    def __init__(self, schema: ArticleSchema, ids: Sequence[str], features: np.ndarray,
                 labels: np.ndarray):
        self.schema = schema
        self.ids = list(ids)
        self.features = np.ascontiguousarray(features, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64).reshape(len(self.ids), len(schema))
        if self.features.shape[0] != len(self.ids):
            raise ConfigurationError("features and ids differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ConfigurationError("sample ids must be unique")
        for k, spec in enumerate(schema.attributes):
            col = self.labels[:, k]
            if np.any((col != MISSING) & ((col < 0) | (col >= spec.num_classes))):
                raise ConfigurationError(f"labels for {spec.name!r} outside [0, {spec.num_classes})")

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> Sample:
        labels = tuple(None if v == MISSING else int(v) for v in self.labels[i])
        return Sample(self.ids[i], self.features[i], labels)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def feature_shape(self) -> tuple:
        return self.features.shape[1:]

    def take(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.schema, [self.ids[i] for i in indices], self.features[indices],
                       self.labels[indices])

    def with_features(self, features: np.ndarray) -> "Dataset":
        return Dataset(self.schema, self.ids, features, self.labels)


@dataclass(frozen=True)
class AttributeView:
    attribute: str
    indices: np.ndarray
    ids: list
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(zip(self.features, self.labels))


def attribute_view(dataset: Dataset, attribute: str) -> AttributeView:
    """Samples whose label for ``attribute`` is present, in dataset order."""
    k = dataset.schema.index(attribute)
    idx = np.flatnonzero(dataset.labels[:, k] != MISSING)
    return AttributeView(attribute, idx, [dataset.ids[i] for i in idx], dataset.features[idx],
                         dataset.labels[idx, k])


@dataclass(frozen=True)
class CompleteView:
    indices: np.ndarray
    ids: list
    features: np.ndarray
    labels: np.ndarray
    targets: np.ndarray  # concatenated one-hot, width m

    def __len__(self):
        return len(self.indices)


def one_hot_targets(schema: ArticleSchema, labels: np.ndarray) -> np.ndarray:
    targets = np.zeros((labels.shape[0], schema.total_classes), np.float32)
    rows = np.arange(labels.shape[0])
    for k, sl in enumerate(schema.slices()):
        targets[rows, sl.start + labels[:, k]] = 1.0
    return targets


def complete_view(dataset: Dataset) -> CompleteView:
    idx = np.flatnonzero(np.all(dataset.labels != MISSING, axis=1))
    labels = dataset.labels[idx]
    return CompleteView(idx, [dataset.ids[i] for i in idx], dataset.features[idx], labels,
                        one_hot_targets(dataset.schema, labels))


def split_train_test(dataset: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Shuffled, unstratified partition with ``round(ratio * N)`` training samples."""
    if not 0 < ratio < 1:
        raise ConfigurationError(f"ratio must be in (0, 1), got {ratio}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(ratio * n + 0.5))
    return dataset.take(perm[:n_train]), dataset.take(perm[n_train:])


# synthetic data


def stripe_pattern(k: int, height: int, width: int) -> np.ndarray:
    """Binary pattern for attribute ``k``: vertical, horizontal or checker stripes.

    Attributes cycle through the three orientations and double the stripe
    width every three attributes, so the first three are separable by 2x2
    difference filters.
    """
    scale = 2 ** (k // 3)
    rows = (np.arange(height) // scale) % 2
    cols = (np.arange(width) // scale) % 2
    kind = k % 3
    if kind == 0:
        bits = np.broadcast_to(cols[None, :], (height, width))
    elif kind == 1:
        bits = np.broadcast_to(rows[:, None], (height, width))
    else:
        bits = (rows[:, None] + cols[None, :]) % 2
    return (bits == 0).astype(np.float32)


def class_amplitudes(num_classes: int) -> np.ndarray:
    return (np.arange(1, num_classes + 1) / num_classes).astype(np.float32)


def default_regions(n: int, image_size: int) -> tuple:
    """``n + 1`` equal bands; the last band is left free of any attribute."""
    h = image_size // (n + 1)
    if h < 1:
        raise ConfigurationError(f"image of {image_size} rows cannot hold {n} bands")
    return tuple((k * h, (k + 1) * h) for k in range(n))


@dataclass(frozen=True)
class SyntheticConfig:
    schema: ArticleSchema
    seed: int = 0
    image_size: int = 32
    regions: Optional[tuple] = None
    missing: Optional[tuple] = None
    noise_std: float = 0.0
    channels: int = 1

    def __post_init__(self):
        n = len(self.schema)
        regions = self.regions if self.regions is not None else default_regions(n, self.image_size)
        regions = tuple((int(a), int(b)) for a, b in regions)
        missing = self.missing if self.missing is not None else (0.3,) * n
        if not isinstance(missing, (tuple, list)):
            missing = (float(missing),) * n
        missing = tuple(float(p) for p in missing)
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "missing", missing)
        if len(regions) != n or len(missing) != n:
            raise ConfigurationError("need one region and one missing probability per attribute")
        for a, b in regions:
            if not 0 <= a < b <= self.image_size:
                raise ConfigurationError(f"region ({a}, {b}) outside the {self.image_size}-row image")
        ordered = sorted(regions)
        for (a0, b0), (a1, b1) in zip(ordered, ordered[1:]):
            if a1 < b0:
                raise ConfigurationError(f"regions ({a0}, {b0}) and ({a1}, {b1}) overlap")
        if any(not 0 <= p < 1 for p in missing):
            raise ConfigurationError("missing probabilities must lie in [0, 1)")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be non-negative")

    @property
    def class_counts(self) -> list[int]:
        return self.schema.class_counts

    @property
    def feature_shape(self) -> tuple:
        return (self.channels, self.image_size, self.image_size)

    def free_regions(self) -> list[tuple]:
        """Maximal row bands not bound to any attribute."""
        out, cursor = [], 0
        for a, b in sorted(self.regions):
            if a > cursor:
                out.append((cursor, a))
            cursor = b
        if cursor < self.image_size:
            out.append((cursor, self.image_size))
        return out

    def to_dict(self) -> dict:
        return {"schema": self.schema.to_dict(), "seed": self.seed, "image_size": self.image_size,
                "regions": [list(r) for r in self.regions], "missing": list(self.missing),
                "noise_std": self.noise_std, "channels": self.channels}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        schema = d.pop("schema")
        schema = preset(schema) if isinstance(schema, str) else ArticleSchema.from_dict(schema)
        if d.get("regions") is not None:
            d["regions"] = tuple(tuple(r) for r in d["regions"])
        if isinstance(d.get("missing"), list):
            d["missing"] = tuple(d["missing"])
        return cls(schema=schema, **d)

    @classmethod
    def load(cls, path) -> "SyntheticConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def render(config: SyntheticConfig, truth: np.ndarray) -> np.ndarray:
    """Noise-free images for a ``count x n`` matrix of class indices."""
    count = truth.shape[0]
    size = config.image_size
    images = np.zeros((count, config.channels, size, size), np.float32)
    for k, ((a, b), c) in enumerate(zip(config.regions, config.class_counts)):
        pattern = stripe_pattern(k, b - a, size)
        amp = class_amplitudes(c)[truth[:, k]]
        images[:, :, a:b, :] = amp[:, None, None, None] * pattern
    return images


def generate_synthetic(config: SyntheticConfig, count: int) -> tuple[Dataset, np.ndarray]:
    """Dataset with masked labels plus the unmasked ``count x n`` ground truth.

    Labels are hidden independently with probability ``missing[k]``. A sample
    whose labels all got hidden has one uniformly chosen label restored, so
    every sample carries at least one label.
    """
    if count < 1:
        raise ConfigurationError("count must be at least 1")
    rng = np.random.default_rng(config.seed)
    n = len(config.schema)
    truth = np.stack([rng.integers(0, c, size=count) for c in config.class_counts], axis=1)
    images = render(config, truth)
    if config.noise_std > 0:
        images += rng.normal(0.0, config.noise_std, size=images.shape).astype(np.float32)
    hide = rng.random((count, n)) < np.asarray(config.missing)
    restore = rng.integers(0, n, size=count)
    empty = np.flatnonzero(hide.all(axis=1))
    hide[empty, restore[empty]] = False
    labels = np.where(hide, MISSING, truth)
    width = len(str(count - 1))
    ids = [f"s{i:0{width}d}" for i in range(count)]
    return Dataset(config.schema, ids, images, labels), truth


def oracle_decode(features: np.ndarray, config: SyntheticConfig) -> np.ndarray:
    """Class indices read straight from the pixels of one image or a batch."""
    feats = np.asarray(features, dtype=np.float64)
    single = feats.ndim == 3
    if single:
        feats = feats[None]
    out = np.empty((feats.shape[0], len(config.schema)), np.int64)
    for k, ((a, b), c) in enumerate(zip(config.regions, config.class_counts)):
        mask = stripe_pattern(k, b - a, config.image_size).astype(bool)
        band = feats[:, :, a:b, :]
        amp = band[:, :, mask].mean(axis=(1, 2))
        out[:, k] = np.abs(amp[:, None] - class_amplitudes(c)[None, :]).argmin(axis=1)
    return out[0] if single else out


# manifests

SCHEMA_SIDECAR = "schema.json"


def _encode_inline(features: np.ndarray) -> str:
    return "hex:" + features.astype("<f4").tobytes().hex()


def _read_features(cell: str, base: Path, shape: tuple, row: int) -> np.ndarray:
    expected = int(np.prod(shape))
    if cell.startswith("hex:"):
        try:
            raw = bytes.fromhex(cell[4:])
        except ValueError as exc:
            raise ValidationError(f"bad inline feature blob: {exc}", row) from exc
    else:
        path = base / cell
        with open(path, "rb") as fh:
            raw = fh.read()
    if len(raw) != 4 * expected:
        raise OSError(f"row {row}: feature payload has {len(raw)} bytes, expected {4 * expected}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)


def write_manifest(dataset: Dataset, path, inline: bool = False) -> Path:
    """Write ``dataset`` as a manifest plus schema sidecar (and feature files)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sidecar = {"schema": dataset.schema.to_dict(), "feature_shape": list(dataset.feature_shape)}
    with open(path.parent / SCHEMA_SIDECAR, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    feat_dir = path.parent / "features"
    if not inline:
        feat_dir.mkdir(exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "features"] + dataset.schema.names)
        for i, sid in enumerate(dataset.ids):
            if inline:
                cell = _encode_inline(dataset.features[i])
            else:
                rel = f"features/{sid}.f32"
                (path.parent / rel).write_bytes(dataset.features[i].astype("<f4").tobytes())
                cell = rel
            names = [spec.class_names[v] if v != MISSING else ""
                     for spec, v in zip(dataset.schema.attributes, dataset.labels[i])]
            writer.writerow([sid, cell] + names)
    return path


def load_manifest(path, schema: Optional[ArticleSchema] = None,
                  feature_shape: Optional[Sequence[int]] = None) -> Dataset:
    """Read a manifest; schema and feature shape default to the sidecar file.

    Row numbers in errors count the header as row 1.
    """
    path = Path(path)
    if schema is None or feature_shape is None:
        with open(path.parent / SCHEMA_SIDECAR) as fh:
            side = json.load(fh)
        schema = schema or ArticleSchema.from_dict(side["schema"])
        feature_shape = feature_shape or side["feature_shape"]
    shape = tuple(int(s) for s in feature_shape)
    ids, feats, labels = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["id", "features"] + schema.names
        if header != expected:
            raise ValidationError(f"header {header} does not match {expected}", 1)
        for rowno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise ValidationError(f"expected {len(expected)} cells, got {len(row)}", rowno)
            sid, cell, *names = row
            lab = []
            for spec, name in zip(schema.attributes, names):
                if name == "":
                    lab.append(MISSING)
                elif name in spec.class_names:
                    lab.append(spec.index(name))
                else:
                    raise ValidationError(f"unknown class {name!r} for attribute {spec.name!r}", rowno)
            if all(v == MISSING for v in lab):
                raise ValidationError(f"sample {sid!r} has no labels", rowno)
            ids.append(sid)
            feats.append(_read_features(cell, path.parent, shape, rowno))
            labels.append(lab)
    features = np.stack(feats) if feats else np.zeros((0,) + shape, np.float32)
    return Dataset(schema, ids, features, np.asarray(labels, np.int64).reshape(-1, len(schema)))
