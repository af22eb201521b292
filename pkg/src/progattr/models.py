"""Residual base/branch networks and the three model families.

A network described by :class:`NetConfig` is a stem convolution followed by
residual stages. Stages before ``split_stage`` (plus the stem) form the shared
:class:`BaseNetwork`; the remaining stages, a global average pool and a dense
head form one :class:`BranchNetwork` per attribute.

Residual blocks have no normalisation layers: ``relu(conv(relu(conv(x))) + skip(x))``
where the skip is a strided 1x1 projection whenever the width or the
resolution changes.

Layer groups number the stem 0, stage ``s`` as ``s + 1`` and the head as
``len(stage_widths) + 1``, so every base group precedes every branch group.
"""

from __future__ import annotations

import copy
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import ArticleSchema, AttributeSpec
from .errors import AlreadyAttachedError, ConfigurationError, InvalidShapeError
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class NetConfig:
    input_channels: int = 1
    input_size: int = 32
    stem_channels: int = 8
    stage_widths: tuple = (8, 16, 32, 32)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    split_stage: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        self.validate()

    def validate(self):
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise ConfigurationError("stage_widths and blocks_per_stage differ in length")
        if not 1 <= self.split_stage < len(self.stage_widths):
            raise ConfigurationError(
                f"split_stage must be in [1, {len(self.stage_widths)}), got {self.split_stage}")
        if min(self.stage_widths + self.blocks_per_stage) < 1:
            raise ConfigurationError("stage widths and block counts must be positive")
        if self.input_channels < 1 or self.stem_channels < 1:
            raise ConfigurationError("channel counts must be positive")
        size = self.input_size
        for s in range(1, len(self.stage_widths)):
            size = (size + 2 - 3) // 2 + 1
        if self.input_size < 1 or size < 1:
            raise ConfigurationError(f"input_size {self.input_size} too small for the stages")

    @property
    def num_groups(self) -> int:
        return len(self.stage_widths) + 2

    @property
    def head_group(self) -> int:
        return len(self.stage_widths) + 1

    @property
    def base_groups(self) -> range:
        return range(0, self.split_stage + 1)

    @property
    def feature_width(self) -> int:
        return self.stage_widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def he_normal(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Module:
    """Minimal container: subclasses list their children in ``_children``."""

    _children: tuple = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name in self._children:
            child = getattr(self, name)
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield full, child
            elif child is not None:
                yield from child.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def clone(self):
        return copy.deepcopy(self)


class Conv(Module):
    _children = ("weight", "bias")

    def __init__(self, cin, cout, k, stride, group, rng):
        self.stride = stride
        self.padding = k // 2
        self.weight = Parameter(he_normal((cout, cin, k, k), cin * k * k, rng), group)
        self.bias = Parameter(np.zeros(cout, np.float32), group)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ResidualBlock(Module):
    _children = ("conv1", "conv2", "proj")

    def __init__(self, cin, cout, stride, group, seed, name):
        self.conv1 = Conv(cin, cout, 3, stride, group, _rng(seed, name + ".conv1"))
        self.conv2 = Conv(cout, cout, 3, 1, group, _rng(seed, name + ".conv2"))
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = Conv(cin, cout, 1, stride, group, _rng(seed, name + ".proj"))

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(self.conv1(x))
        h = self.conv2(h)
        skip = self.proj(x) if self.proj is not None else x
        return T.relu(T.add(h, skip))


class Stage(Module):
    def __init__(self, index, cin, cout, blocks, seed):
        self.index = index
        stride = 1 if index == 0 else 2
        names = []
        for b in range(blocks):
            name = f"block{b}"
            setattr(self, name, ResidualBlock(cin if b == 0 else cout, cout,
                                              stride if b == 0 else 1, index + 1,
                                              seed, f"stage{index}.{name}"))
            names.append(name)
        self._children = tuple(names)

    def __call__(self, x: Tensor) -> Tensor:
        for name in self._children:
            x = getattr(self, name)(x)
        return x


class BaseNetwork(Module):
    """Stem plus stages ``[0, split_stage)``; run once per image batch."""

    def __init__(self, config: NetConfig, seed: int):
        self.config = config
        self.stem = Conv(config.input_channels, config.stem_channels, 3, 1, 0, _rng(seed, "stem"))
        names = ["stem"]
        cin = config.stem_channels
        for s in range(config.split_stage):
            setattr(self, f"stage{s}", Stage(s, cin, config.stage_widths[s],
                                             config.blocks_per_stage[s], seed))
            names.append(f"stage{s}")
            cin = config.stage_widths[s]
        self._children = tuple(names)

    def __call__(self, x: Tensor) -> Tensor:
        c = self.config
        if x.data.ndim != 4 or x.shape[1:] != (c.input_channels, c.input_size, c.input_size):
            raise InvalidShapeError(
                f"expected N x {c.input_channels} x {c.input_size} x {c.input_size}, got {x.shape}")
        h = T.relu(self.stem(x))
        for name in self._children[1:]:
            h = getattr(self, name)(h)
        return h


class BranchBody(Module):
    """Stages ``[split_stage, end)``; the part shared in shape by all branches."""

    def __init__(self, config: NetConfig, seed: int):
        names = []
        for s in range(config.split_stage, len(config.stage_widths)):
            cin = config.stage_widths[s - 1]
            setattr(self, f"stage{s}", Stage(s, cin, config.stage_widths[s],
                                             config.blocks_per_stage[s], seed))
            names.append(f"stage{s}")
        self._children = tuple(names)

    def __call__(self, x: Tensor) -> Tensor:
        for name in self._children:
            x = getattr(self, name)(x)
        return x


class Head(Module):
    _children = ("weight", "bias")

    def __init__(self, features: int, classes: int, group: int, rng):
        self.weight = Parameter(he_normal((features, classes), features, rng), group)
        self.bias = Parameter(np.zeros(classes, np.float32), group)

    def __call__(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)


class BranchNetwork(Module):
    _children = ("body", "head")

    def __init__(self, body: BranchBody, head: Head):
        self.body = body
        self.head = head

    @property
    def num_classes(self) -> int:
        return self.head.bias.shape[0]

    def logits(self, features: Tensor) -> Tensor:
        return self.head(T.global_avg_pool(self.body(features)))

    def __call__(self, features: Tensor) -> Tensor:
        return T.softmax(self.logits(features))


def build_reference_init(config: NetConfig, seed: int) -> tuple[BaseNetwork, BranchBody]:
    """Base weights and the reference branch body every branch is cloned from."""
    if not isinstance(config, NetConfig):
        raise ConfigurationError("config must be a NetConfig")
    config.validate()
    return BaseNetwork(config, seed), BranchBody(config, seed)


def make_head(config: NetConfig, seed: int, attribute: str, classes: int) -> Head:
    if classes < 2:
        raise ConfigurationError(f"attribute {attribute!r} needs at least 2 classes")
    return Head(config.feature_width, classes, config.head_group, _rng(seed, "head:" + attribute))


def _as_batch(batch) -> Tensor:
    return batch if isinstance(batch, Tensor) else Tensor(batch)


class ProgressiveModel:
    """Shared base plus an ordered set of per-attribute branches.

    ``kind`` is ``"progressive"`` or ``"individual"``; an individual model is
    the same structure holding exactly one branch.
    """

    def __init__(self, config: NetConfig, schema: ArticleSchema, seed: int = 0,
                 kind: str = "progressive"):
        self.config = config
        self.schema = schema
        self.seed = int(seed)
        self.kind = kind
        self.base, self.reference_body = build_reference_init(config, seed)
        self.branches: "OrderedDict[str, BranchNetwork]" = OrderedDict()
        self.base_forward_calls = 0

    @property
    def n(self) -> int:
        return len(self.branches)

    @property
    def attributes(self) -> list[str]:
        return list(self.branches)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        yield from self.base.named_parameters("base.")
        for name, branch in self.branches.items():
            yield from branch.named_parameters(f"branch.{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def component_of(self, record_name: str) -> str:
        if record_name.startswith("base."):
            return "base"
        return "branch:" + record_name.split(".")[1]

    def forward_base(self, batch) -> Tensor:
        self.base_forward_calls += 1
        return self.base(_as_batch(batch))

    def forward_logits(self, batch) -> list[Tensor]:
        feats = self.forward_base(batch)
        return [b.logits(feats) for b in self.branches.values()]

    def forward_shared(self, batch) -> list[Tensor]:
        return forward_shared(self, batch)

    def predict_proba(self, batch) -> "OrderedDict[str, np.ndarray]":
        probs = forward_shared(self, batch)
        return OrderedDict((a, p.data) for a, p in zip(self.branches, probs))

    def clone(self) -> "ProgressiveModel":
        return copy.deepcopy(self)


def attach_branch(model: ProgressiveModel, attribute, num_classes: Optional[int] = None,
                  class_names: Optional[Sequence[str]] = None) -> ProgressiveModel:
    """Attach a branch for ``attribute`` with a body cloned from the reference init.

    ``attribute`` may be an :class:`AttributeSpec` or a name. A name missing
    from the schema extends the schema, in which case ``num_classes`` is needed.
    """
    if isinstance(attribute, AttributeSpec):
        spec = attribute
    elif attribute in model.schema:
        spec = model.schema[attribute]
    else:
        if num_classes is None:
            raise ConfigurationError(f"attribute {attribute!r} is not in the schema; give num_classes")
        spec = AttributeSpec.make(attribute, num_classes, class_names)
    if spec.name in model.branches:
        raise AlreadyAttachedError(f"attribute {spec.name!r} already has a branch")
    if spec.name not in model.schema:
        model.schema = model.schema.with_attribute(spec)
    elif model.schema[spec.name].num_classes != spec.num_classes:
        raise ConfigurationError(f"class count for {spec.name!r} disagrees with the schema")
    head = make_head(model.config, model.seed, spec.name, spec.num_classes)
    model.branches[spec.name] = BranchNetwork(model.reference_body.clone(), head)
    return model


def forward_shared(model: ProgressiveModel, batch) -> list[Tensor]:
    """One base pass feeding every branch; returns per-branch probabilities."""
    feats = model.forward_base(batch)
    return [branch(feats) for branch in model.branches.values()]


def build_progressive(config: NetConfig, schema: ArticleSchema, seed: int = 0,
                      attributes: Optional[Sequence[str]] = None) -> ProgressiveModel:
    model = ProgressiveModel(config, schema, seed)
    for name in attributes if attributes is not None else schema.names:
        attach_branch(model, name)
    return model


def build_individual(config: NetConfig, schema: ArticleSchema, attribute: str,
                     seed: int = 0) -> ProgressiveModel:
    """Standalone base + one branch network for a single attribute."""
    if attribute not in schema:
        raise ConfigurationError(f"unknown attribute {attribute!r}")
    model = ProgressiveModel(config, schema, seed, kind="individual")
    attach_branch(model, attribute)
    return model


def standalone_branch(model: ProgressiveModel, attribute: str) -> ProgressiveModel:
    """An individual model holding copies of the base and one branch of ``model``."""
    if attribute not in model.branches:
        raise ConfigurationError(f"model has no branch {attribute!r}")
    single = ProgressiveModel.__new__(ProgressiveModel)
    single.config = model.config
    single.schema = model.schema
    single.seed = model.seed
    single.kind = "individual"
    single.base = model.base.clone()
    single.reference_body = model.reference_body.clone()
    single.branches = OrderedDict([(attribute, model.branches[attribute].clone())])
    single.base_forward_calls = 0
    return single


class Ensemble:
    """A set of individual models queried together, one base pass each."""

    def __init__(self, models: Sequence[ProgressiveModel]):
        if not models:
            raise ConfigurationError("an ensemble needs at least one model")
        self.models = OrderedDict()
        for m in models:
            (name,) = m.branches
            self.models[name] = m
        self.config = models[0].config
        self.schema = models[0].schema

    @classmethod
    def from_progressive(cls, model: ProgressiveModel) -> "Ensemble":
        return cls([standalone_branch(model, a) for a in model.branches])

    @property
    def attributes(self) -> list[str]:
        return list(self.models)

    @property
    def n(self) -> int:
        return len(self.models)

    @property
    def base_forward_calls(self) -> int:
        return sum(m.base_forward_calls for m in self.models.values())

    def reset_counters(self) -> None:
        for m in self.models.values():
            m.base_forward_calls = 0

    def forward(self, batch) -> list[Tensor]:
        return [forward_shared(m, batch)[0] for m in self.models.values()]

    def predict_proba(self, batch) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((a, p.data) for a, p in zip(self.models, self.forward(batch)))


class MultiLabelModel:
    """Base plus one branch body whose head has one sigmoid unit per class of every attribute."""

    kind = "multilabel"

    def __init__(self, config: NetConfig, schema: ArticleSchema, seed: int = 0):
        if len(schema) == 0:
            raise ConfigurationError("multi-label model needs a non-empty schema")
        self.config = config
        self.schema = schema
        self.seed = int(seed)
        self.base, body = build_reference_init(config, seed)
        self.branch = BranchNetwork(body, make_head(config, seed, "__multilabel__", schema.total_classes))
        self.base_forward_calls = 0

    @property
    def m(self) -> int:
        return self.branch.num_classes

    @property
    def attributes(self) -> list[str]:
        return self.schema.names

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        yield from self.base.named_parameters("base.")
        yield from self.branch.named_parameters("branch.__multilabel__.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def component_of(self, record_name: str) -> str:
        return "base" if record_name.startswith("base.") else "head"

    def forward_logits(self, batch) -> Tensor:
        self.base_forward_calls += 1
        return self.branch.logits(self.base(_as_batch(batch)))

    def forward(self, batch) -> Tensor:
        return T.sigmoid(self.forward_logits(batch))

    def predict_proba(self, batch) -> "OrderedDict[str, np.ndarray]":
        """Per-attribute slices of the sigmoid outputs (not normalised)."""
        out = self.forward(batch).data
        return OrderedDict((a, out[:, sl]) for a, sl in zip(self.schema.names, self.schema.slices()))

    def clone(self) -> "MultiLabelModel":
        return copy.deepcopy(self)


def build_multilabel(config: NetConfig, schema: ArticleSchema, seed: int = 0) -> MultiLabelModel:
    return MultiLabelModel(config, schema, seed)


def predict(model, batch) -> "OrderedDict[str, np.ndarray]":
    """Argmax class index per attribute for any model family."""
    return OrderedDict((a, p.argmax(axis=1)) for a, p in model.predict_proba(batch).items())


def count_params(model) -> dict[str, int]:
    """Parameter counts per component plus ``total``, ``trainable`` and ``frozen``.

    Components are ``base`` and ``branch:<attribute>`` (``head`` for the
    multi-label model). Ensembles report the sum over their members under
    ``model:<attribute>``.
    """
    counts: dict[str, int] = {}
    if isinstance(model, Ensemble):
        for name, m in model.models.items():
            counts[f"model:{name}"] = count_params(m)["total"]
        counts["total"] = sum(counts.values())
        sub = [count_params(m) for m in model.models.values()]
        counts["trainable"] = sum(s["trainable"] for s in sub)
        counts["frozen"] = sum(s["frozen"] for s in sub)
        return counts
    counts["base"] = 0
    trainable = frozen = 0
    for name, p in model.named_parameters():
        comp = model.component_of(name)
        counts[comp] = counts.get(comp, 0) + p.size
        if p.trainable:
            trainable += p.size
        else:
            frozen += p.size
    counts["total"] = trainable + frozen
    counts["trainable"] = trainable
    counts["frozen"] = frozen
    return counts


def branch_param_count(config: NetConfig, num_classes: int) -> int:
    body = BranchBody(config, 0)
    return sum(p.size for p in body.parameters()) + config.feature_width * num_classes + num_classes


def base_param_count(config: NetConfig) -> int:
    return sum(p.size for p in BaseNetwork(config, 0).parameters())
