"""Progressive branch training, the two baseline trainers and order experiments.

The progressive schedule for attributes ``A_1 .. A_n``:

``P1``
    base + ``N_1`` trained on ``A_1`` with the differential learning rates.
``P2_i``
    ``N_i`` attached; only base + ``N_i`` are trained, earlier branches frozen.
``P3_i``
    everything unfrozen; attached attributes are interleaved round-robin,
    one attribute minibatch per step, with every rate scaled by
    ``fine_tune_factor``.
``P4``
    base frozen; branches fine-tuned one at a time (``sequential``) or with
    their losses summed (``joint``).

Every optimisation step sees one attribute's minibatch and its cross-entropy,
so only the base (when unfrozen) and that attribute's branch move.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, attribute_view, complete_view, split_train_test
from .errors import ConfigurationError, DataInsufficiencyError
from .models import (MultiLabelModel, NetConfig, ProgressiveModel, attach_branch,
                     build_individual, build_multilabel)
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

PHASE_CODES = {"P1": 1, "P2": 2, "P3": 3, "P4": 4, "IND": 5, "ML": 6}


@dataclass(frozen=True)
class TrainConfig:
    attribute_order: Optional[tuple] = None
    lr_min: float = 1e-3
    lr_max: float = 1e-2
    fine_tune_factor: float = 0.1
    epochs_first: int = 5
    epochs_new_branch: int = 3
    epochs_joint_finetune: int = 2
    epochs_final_branch: int = 3
    batch_size: int = 32
    momentum: float = 0.9
    grad_clip: Optional[float] = 5.0
    seed: int = 0
    final_branch_mode: str = "sequential"
    repeats: int = 1
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if self.attribute_order is not None:
            object.__setattr__(self, "attribute_order", tuple(self.attribute_order))
        if isinstance(self.net, dict):
            object.__setattr__(self, "net", NetConfig.from_dict(self.net))
        if self.lr_min > self.lr_max or self.lr_min <= 0:
            raise ConfigurationError("need 0 < lr_min <= lr_max")
        if not 0 < self.fine_tune_factor <= 1:
            raise ConfigurationError("fine_tune_factor must be in (0, 1]")
        epochs = (self.epochs_first, self.epochs_new_branch, self.epochs_joint_finetune,
                  self.epochs_final_branch)
        if min(epochs) < 0:
            raise ConfigurationError("epoch counts must be non-negative")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError("grad_clip must be positive or None")
        if self.batch_size < 1 or self.repeats < 1:
            raise ConfigurationError("batch_size and repeats must be at least 1")
        if self.final_branch_mode not in ("sequential", "joint"):
            raise ConfigurationError("final_branch_mode must be 'sequential' or 'joint'")

    def order_for(self, schema) -> list[str]:
        order = list(self.attribute_order) if self.attribute_order else schema.names
        if sorted(order) != sorted(set(order)) or any(a not in schema for a in order):
            raise ConfigurationError(f"attribute_order {order} is not a set of schema attributes")
        return order

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        d["attribute_order"] = list(self.attribute_order) if self.attribute_order else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


@dataclass
class PhaseRecord:
    kind: str
    attributes: tuple
    epochs: int
    losses: list
    updated: list
    index: Optional[int] = None
    lrs: dict = field(default_factory=dict)
    samples_seen: list = field(default_factory=list)

    @property
    def tag(self) -> str:
        return self.kind if self.index is None else f"{self.kind}_{self.index}"


@dataclass
class PhaseLog:
    phases: list = field(default_factory=list)
    samples_touched: set = field(default_factory=set)

    @property
    def tags(self) -> list[str]:
        return [p.tag for p in self.phases]

    def to_records(self) -> list[dict]:
        out = []
        for p in self.phases:
            out.append({"phase": p.tag, "kind": p.kind, "attributes": list(p.attributes),
                        "epochs": p.epochs, "losses": [float(x) for x in p.losses],
                        "updated": list(p.updated), "samples_seen": list(p.samples_seen),
                        "lrs": {str(k): v for k, v in p.lrs.items()}})
        return out

    def to_json(self) -> str:
        return json.dumps({"phases": self.to_records(),
                           "distinct_samples": len(self.samples_touched)}, indent=2)

    def to_text(self) -> str:
        lines = []
        for p in self.phases:
            losses = " ".join(f"{x:.4f}" for x in p.losses)
            lines.append(f"{p.tag:6s} attrs={','.join(p.attributes)} epochs={p.epochs} "
                         f"updated={','.join(p.updated)} loss=[{losses}]")
        return "\n".join(lines)


def differential_lr_assign(model_or_groups, lr_min: float, lr_max: float) -> dict[int, float]:
    """Geometric ramp ``lr_min * (lr_max / lr_min) ** (g / (G - 1))`` over groups."""
    if lr_min > lr_max:
        raise ConfigurationError(f"lr_min {lr_min} exceeds lr_max {lr_max}")
    if isinstance(model_or_groups, int):
        groups = model_or_groups
    elif isinstance(model_or_groups, NetConfig):
        groups = model_or_groups.num_groups
    else:
        groups = model_or_groups.config.num_groups
    if groups < 1:
        raise ConfigurationError("need at least one layer group")
    if groups == 1:
        return {0: float(lr_max)}
    ratio = lr_max / lr_min
    return {g: float(lr_min * ratio ** (g / (groups - 1))) for g in range(groups)}


def _scaled(lrs: dict, factor: float) -> dict:
    return {g: lr * factor for g, lr in lrs.items()}


def _batches(n: int, batch_size: int, seed: int, *key) -> list[np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in key]))
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _key(name: str) -> int:
    return zlib.crc32(name.encode())


def _reset_velocity(params) -> None:
    for p in params:
        p.velocity.fill(0)


def train_step(model: ProgressiveModel, attribute: str, x: np.ndarray, y: np.ndarray,
               group_lrs: dict, momentum: float = 0.9, grad_clip: Optional[float] = None) -> float:
    """One SGD step on one attribute's minibatch; returns the batch loss."""
    branch = model.branches[attribute]
    with Tape() as tape:
        logits = branch.logits(model.forward_base(Tensor(x)))
        loss = T.cross_entropy(logits, y)
        tape.backward(loss)
    params = model.base.parameters() + branch.parameters()
    T.clip_grad_norm(params, grad_clip)
    T.sgd_step(params, group_lrs, momentum)
    return float(loss.data)


def _views(dataset: Dataset, order: Sequence[str]) -> dict:
    views = {}
    for name in order:
        view = attribute_view(dataset, name)
        if len(view) == 0:
            raise DataInsufficiencyError(f"no labelled samples for attribute {name!r}", name)
        views[name] = view
    return views


class _Runner:
    """Holds the state shared by the phases of one training run."""

    def __init__(self, model, dataset, config: TrainConfig, log: PhaseLog,
                 callback: Optional[Callable] = None):
        self.model = model
        self.dataset = dataset
        self.config = config
        self.log = log
        self.callback = callback
        self.base_lrs = differential_lr_assign(model.config, config.lr_min, config.lr_max)

    def _event(self, event: str, record: PhaseRecord) -> None:
        if self.callback is not None:
            self.callback(event, record, self.model)

    def _touch(self, view, idx) -> None:
        self.log.samples_touched.update(view.ids[i] for i in idx)

    def single(self, kind, view, epochs, lrs, index=None, phase_key=None):
        """Train base + one branch on one attribute view (P1, P2, individual)."""
        cfg, model = self.config, self.model
        attr = view.attribute
        for name, branch in model.branches.items():
            branch.set_trainable(name == attr)
        model.base.set_trainable(True)
        _reset_velocity(model.parameters())
        rec = PhaseRecord(kind, (attr,), epochs, [], ["base", attr], index, dict(lrs))
        self._event("start", rec)
        for epoch in range(epochs):
            total = seen = 0
            for idx in _batches(len(view), cfg.batch_size, cfg.seed, PHASE_CODES[phase_key or kind],
                                index or 0, _key(attr), epoch):
                loss = train_step(model, attr, view.features[idx], view.labels[idx], lrs, cfg.momentum,
                                  cfg.grad_clip)
                total += loss * len(idx)
                seen += len(idx)
                self._touch(view, idx)
            rec.losses.append(total / max(seen, 1))
            rec.samples_seen.append(seen)
        self.log.phases.append(rec)
        self._event("end", rec)
        logger.info("%s done: %s", rec.tag, rec.losses)
        return rec

    def joint(self, views: dict, epochs: int, lrs: dict, index: int):
        """Round-robin fine-tuning of base and all attached branches (P3)."""
        cfg, model = self.config, self.model
        model.base.set_trainable(True)
        for branch in model.branches.values():
            branch.set_trainable(True)
        _reset_velocity(model.parameters())
        names = list(views)
        rec = PhaseRecord("P3", tuple(names), epochs, [], ["base"] + names, index, dict(lrs))
        self._event("start", rec)
        for epoch in range(epochs):
            queues = {a: _batches(len(views[a]), cfg.batch_size, cfg.seed, PHASE_CODES["P3"], index,
                                  _key(a), epoch) for a in names}
            total = seen = 0
            step = 0
            while any(step < len(q) for q in queues.values()):
                for a in names:
                    if step < len(queues[a]):
                        idx = queues[a][step]
                        v = views[a]
                        total += train_step(model, a, v.features[idx], v.labels[idx], lrs,
                                            cfg.momentum, cfg.grad_clip) * len(idx)
                        seen += len(idx)
                        self._touch(v, idx)
                step += 1
            rec.losses.append(total / max(seen, 1))
            rec.samples_seen.append(seen)
        self.log.phases.append(rec)
        self._event("end", rec)
        logger.info("%s done: %s", rec.tag, rec.losses)
        return rec

    def final(self, views: dict, epochs: int, lrs: dict):
        """Base frozen; branches fine-tuned on cached base features (P4)."""
        cfg, model = self.config, self.model
        model.base.set_trainable(False)
        names = list(views)
        rec = PhaseRecord("P4", tuple(names), epochs, [], names, None, dict(lrs))
        self._event("start", rec)
        if epochs == 0:
            self.log.phases.append(rec)
            self._event("end", rec)
            return rec
        cached = {a: self._features(views[a]) for a in names}
        for branch in model.branches.values():
            branch.set_trainable(True)
        _reset_velocity(model.parameters())

        def step(pairs):
            params = []
            with Tape() as tape:
                loss = None
                for a, idx in pairs:
                    branch = model.branches[a]
                    li = T.cross_entropy(branch.logits(Tensor(cached[a][idx])), views[a].labels[idx])
                    loss = li if loss is None else T.add(loss, li)
                    params += branch.parameters()
                tape.backward(loss)
            T.clip_grad_norm(params, cfg.grad_clip)
            T.sgd_step(params, lrs, cfg.momentum)
            return float(loss.data)

        if cfg.final_branch_mode == "sequential":
            per_epoch = [[0.0, 0] for _ in range(epochs)]
            for a in names:
                for epoch in range(epochs):
                    for idx in _batches(len(views[a]), cfg.batch_size, cfg.seed, PHASE_CODES["P4"],
                                        0, _key(a), epoch):
                        per_epoch[epoch][0] += step([(a, idx)]) * len(idx)
                        per_epoch[epoch][1] += len(idx)
                        self._touch(views[a], idx)
            rec.losses = [t / max(s, 1) for t, s in per_epoch]
            rec.samples_seen = [s for _, s in per_epoch]
        else:
            for epoch in range(epochs):
                queues = {a: _batches(len(views[a]), cfg.batch_size, cfg.seed, PHASE_CODES["P4"], 0,
                                      _key(a), epoch) for a in names}
                total = seen = 0
                steps = max(len(q) for q in queues.values())
                for s in range(steps):
                    pairs = [(a, q[s]) for a, q in queues.items() if s < len(q)]
                    total += step(pairs)
                    seen += sum(len(idx) for _, idx in pairs)
                    for a, idx in pairs:
                        self._touch(views[a], idx)
                rec.losses.append(total / max(steps, 1))
                rec.samples_seen.append(seen)
        self.log.phases.append(rec)
        self._event("end", rec)
        logger.info("%s done: %s", rec.tag, rec.losses)
        return rec

    def _features(self, view) -> np.ndarray:
        out = []
        bs = max(self.config.batch_size, 64)
        for i in range(0, len(view), bs):
            out.append(self.model.forward_base(view.features[i:i + bs]).data)
        return np.concatenate(out) if out else np.zeros((0,), np.float32)


def train_progressive(dataset: Dataset, config: TrainConfig = TrainConfig(),
                      callback: Optional[Callable] = None,
                      model: Optional[ProgressiveModel] = None) -> tuple[ProgressiveModel, PhaseLog]:
    """Run the progressive schedule; returns the trained model and its phase log.

    ``callback(event, record, model)`` is invoked with ``"start"`` and
    ``"end"`` around every phase. With ``config.repeats > 1`` the joint
    fine-tune over all branches and the final frozen-base phase are
    repeated after the first full pass.
    """
    order = config.order_for(dataset.schema)
    if not order:
        raise ConfigurationError("need at least one attribute")
    views = _views(dataset, order)
    if model is None:
        model = ProgressiveModel(config.net, dataset.schema, config.seed)
    log = PhaseLog()
    run = _Runner(model, dataset, config, log, callback)
    lrs = run.base_lrs
    fine = _scaled(lrs, config.fine_tune_factor)

    attach_branch(model, order[0])
    run.single("P1", views[order[0]], config.epochs_first, lrs, None)
    for i, name in enumerate(order[1:], start=2):
        attach_branch(model, name)
        run.single("P2", views[name], config.epochs_new_branch, lrs, i)
        run.joint({a: views[a] for a in order[:i]}, config.epochs_joint_finetune, fine, i)
    run.final(views, config.epochs_final_branch, lrs)
    for r in range(1, config.repeats):
        run.joint(views, config.epochs_joint_finetune, fine, len(order) + r)
        run.final(views, config.epochs_final_branch, lrs)
    model.base.set_trainable(True)
    return model, log


def train_individual(dataset: Dataset, attribute: str, config: TrainConfig = TrainConfig(),
                     epochs: Optional[int] = None) -> tuple[ProgressiveModel, PhaseLog]:
    """Base + one branch trained end to end on one attribute.

    ``epochs`` defaults to ``epochs_first + epochs_final_branch``.
    """
    if attribute not in dataset.schema:
        raise ConfigurationError(f"unknown attribute {attribute!r}")
    (view,) = _views(dataset, [attribute]).values()
    model = build_individual(config.net, dataset.schema, attribute, config.seed)
    if epochs is None:
        epochs = config.epochs_first + config.epochs_final_branch
    log = PhaseLog()
    run = _Runner(model, dataset, config, log)
    run.single("IND", view, epochs, run.base_lrs, None, phase_key="P1")
    return model, log


def train_multilabel(dataset: Dataset, config: TrainConfig = TrainConfig(),
                     epochs: Optional[int] = None) -> tuple[MultiLabelModel, PhaseLog]:
    """Sigmoid head over all classes, trained on fully labelled samples only."""
    view = complete_view(dataset)
    if len(view) == 0:
        raise DataInsufficiencyError("no fully labelled samples for the multi-label baseline")
    model = build_multilabel(config.net, dataset.schema, config.seed)
    if epochs is None:
        epochs = config.epochs_first + config.epochs_final_branch
    lrs = differential_lr_assign(model.config, config.lr_min, config.lr_max)
    log = PhaseLog()
    rec = PhaseRecord("ML", tuple(dataset.schema.names), epochs, [], ["base", "head"], None, dict(lrs))
    params = model.parameters()
    for epoch in range(epochs):
        total = seen = 0
        for idx in _batches(len(view), config.batch_size, config.seed, PHASE_CODES["ML"], 0, epoch):
            with Tape() as tape:
                loss = T.multilabel_soft_margin(model.forward_logits(view.features[idx]),
                                                view.targets[idx])
                tape.backward(loss)
            T.clip_grad_norm(params, config.grad_clip)
            T.sgd_step(params, lrs, config.momentum)
            total += float(loss.data) * len(idx)
            seen += len(idx)
            log.samples_touched.update(view.ids[i] for i in idx)
        rec.losses.append(total / max(seen, 1))
        rec.samples_seen.append(seen)
    log.phases.append(rec)
    return model, log


def add_attribute(model: ProgressiveModel, dataset: Dataset, attribute: str,
                  config: TrainConfig = TrainConfig(), epochs: Optional[int] = None
                  ) -> tuple[ProgressiveModel, PhaseLog]:
    """Attach and train a branch for a new attribute with the base frozen.

    Existing branches and the base are left bit-identical. ``epochs``
    defaults to ``epochs_new_branch + epochs_final_branch``.
    """
    if attribute not in dataset.schema:
        raise ConfigurationError(f"dataset has no labels for attribute {attribute!r}")
    spec = dataset.schema[attribute]
    (view,) = _views(dataset, [attribute]).values()
    attach_branch(model, spec)
    if epochs is None:
        epochs = config.epochs_new_branch + config.epochs_final_branch
    log = PhaseLog()
    run = _Runner(model, dataset, config, log)
    run.final({attribute: view}, epochs, run.base_lrs)
    model.base.set_trainable(True)
    return model, log


def exposure_epochs(config: TrainConfig, n: int) -> list[int]:
    """Epochs each attribute (by position) sees during one progressive pass."""
    out = []
    for pos in range(n):
        e = config.epochs_first if pos == 0 else config.epochs_new_branch
        # joint phases P3_i include this attribute for every i > max(pos, 0)
        e += config.epochs_joint_finetune * (n - max(pos, 1))
        e += config.epochs_final_branch
        e += (config.repeats - 1) * (config.epochs_joint_finetune + config.epochs_final_branch)
        out.append(e)
    return out


@dataclass
class ReorderResult:
    rows: list  # (ordering tuple, EvalReport)

    @property
    def overall(self) -> list[float]:
        return [r.overall for _, r in self.rows]

    @property
    def spread(self) -> float:
        vals = self.overall
        return max(vals) - min(vals)

    def to_text(self) -> str:
        lines = ["ordering,overall"]
        lines += [f"{' > '.join(o)},{r.overall:.2f}" for o, r in self.rows]
        lines.append(f"spread,{self.spread:.2f}")
        return "\n".join(lines)


def reorder_experiment(dataset: Dataset, config: TrainConfig = TrainConfig(),
                       orderings: Optional[Sequence[Sequence[str]]] = None,
                       test: Optional[Dataset] = None, max_attributes: int = 5,
                       allow_large: bool = False) -> ReorderResult:
    """Train one progressive model per ordering with identical seed and data.

    Without ``test`` the dataset is split 80/20 with ``config.seed``.
    """
    from .metrics import evaluate

    names = dataset.schema.names
    if orderings is None:
        if len(names) > max_attributes and not allow_large:
            raise ConfigurationError(
                f"{len(names)}! orderings requested; pass allow_large=True or explicit orderings")
        orderings = list(itertools.permutations(names))
    if test is None:
        dataset, test = split_train_test(dataset, 0.8, config.seed)
    rows = []
    for order in orderings:
        model, _ = train_progressive(dataset, replace(config, attribute_order=tuple(order)))
        rows.append((tuple(order), evaluate(model, test)))
    return ReorderResult(rows)
