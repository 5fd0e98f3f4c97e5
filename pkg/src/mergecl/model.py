"""Feed-forward classifier with a class-incrementally expandable head.

The head keeps one named (weight row, bias) pair per class, so merge rules
can treat rows introduced at different tasks independently.  The stack of
hidden layers stands in for a frozen-ish pre-trained feature extractor at
desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, ParamSet, Tensor
from .errors import InputError, UsageError

_ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise InputError("layer dimensions must be positive")
        if self.activation not in _ACTIVATIONS:
            raise InputError(f"activation must be one of {_ACTIVATIONS}")
        if self.seed < 0:
            raise InputError("seed must be a nonnegative integer")

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim


@dataclass(frozen=True)
class HeadRow:
    class_id: int
    task_id: int


def _weight_name(layer: int) -> str:
    return f"backbone.L{layer:02d}.weight"


def _bias_name(layer: int) -> str:
    return f"backbone.L{layer:02d}.bias"


def head_entry_names(class_id: int) -> tuple[str, str]:
    return f"head.c{class_id:04d}.weight", f"head.c{class_id:04d}.bias"


@dataclass(frozen=True)
class ClassifierModel:
    """Immutable (config, parameters, head layout) triple.

    Training and merging produce new ParamSets; `with_params` rebinds them
    to the same structure.
    """

    config: MlpConfig
    params: ParamSet
    head: tuple[HeadRow, ...] = field(default_factory=tuple)

    @property
    def num_classes(self) -> int:
        return len(self.head)

    def with_params(self, params: ParamSet) -> "ClassifierModel":
        self.params.require_aligned(params, context="model parameters")
        return ClassifierModel(self.config, params, self.head)

    def backbone_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.params.names if n.startswith("backbone."))

    # -- forward passes ---------------------------------------------------

    def _activation(self, x: Tensor) -> Tensor:
        return ad.tanh(x) if self.config.activation == "tanh" else ad.relu(x)

    def features_on_tape(self, nodes: dict[str, Tensor], x) -> Tensor:
        tape = next(iter(nodes.values())).tape if nodes else None
        if tape is None:
            raise UsageError("features_on_tape needs watched parameter nodes")
        h = tape.lift(x)
        for layer in range(len(self.config.hidden_dims)):
            h = ad.forward_linear(h, nodes[_weight_name(layer)], nodes[_bias_name(layer)])
            h = self._activation(h)
        return h

    def logits_on_tape(self, nodes: dict[str, Tensor], x) -> Tensor:
        if not self.head:
            raise UsageError("model head is empty; expand_head before computing logits")
        feats = self.features_on_tape(nodes, x)
        rows = []
        for row in self.head:
            wname, bname = head_entry_names(row.class_id)
            rows.append((nodes[wname], nodes[bname]))
        return ad.head_logits(feats, rows)

    def features(self, x: np.ndarray) -> np.ndarray:
        tape = GradTape()
        return self.features_on_tape(tape.watch(self.params), x).data

    def logits(self, x: np.ndarray) -> np.ndarray:
        tape = GradTape()
        return self.logits_on_tape(tape.watch(self.params), x).data


def init_model(config: MlpConfig, seed: int | None = None) -> ClassifierModel:
    """Seeded random model with an empty head.

    Hidden weights use a 1/sqrt(fan_in) Gaussian scale; biases start at
    zero.  `seed` defaults to config.seed.
    """
    seed = config.seed if seed is None else int(seed)
    if seed < 0:
        raise InputError("seed must be a nonnegative integer")
    rng = np.random.default_rng(seed)
    entries: dict[str, np.ndarray] = {}
    fan_in = config.input_dim
    for layer, width in enumerate(config.hidden_dims):
        entries[_weight_name(layer)] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, width))
        entries[_bias_name(layer)] = np.zeros(width)
        fan_in = width
    return ClassifierModel(config, ParamSet(entries))


def expand_head(model: ClassifierModel, new_classes, task_id: int) -> ClassifierModel:
    """Append seeded 0.01-scale Gaussian rows for new classes.

    Existing parameters are carried over bit-unchanged.  Class ids must be
    the next contiguous block (ids are column indices of the logit matrix).
    """
    new_classes = [int(c) for c in new_classes]
    if not new_classes:
        raise InputError("expand_head needs at least one new class")
    existing = {row.class_id for row in model.head}
    dup = existing.intersection(new_classes)
    if dup or len(set(new_classes)) != len(new_classes):
        raise InputError(f"duplicate class ids in expand_head: {sorted(dup) or new_classes}")
    expected = list(range(len(existing), len(existing) + len(new_classes)))
    if new_classes != expected:
        raise InputError(
            f"class ids must stay contiguous from 0 in appearance order; "
            f"expected {expected}, got {new_classes}"
        )
    rng = np.random.default_rng((model.config.seed, 7919, int(task_id)))
    feat = model.config.feature_dim
    updates = dict(model.params.items())
    rows = list(model.head)
    for cid in new_classes:
        wname, bname = head_entry_names(cid)
        updates[wname] = 0.01 * rng.normal(size=feat)
        updates[bname] = 0.01 * rng.normal(size=())
        rows.append(HeadRow(class_id=cid, task_id=int(task_id)))
    return ClassifierModel(model.config, ParamSet(updates), tuple(rows))


def shared_param_mask(model: ClassifierModel, task_id: int) -> dict[str, bool]:
    """True for backbone entries and head rows introduced before task_id."""
    if task_id < 1:
        raise InputError("task_id must be >= 1")
    intro = {row.class_id: row.task_id for row in model.head}
    mask: dict[str, bool] = {}
    for name in model.params.names:
        if name.startswith("backbone."):
            mask[name] = True
        else:
            cid = int(name.split(".")[1][1:])
            mask[name] = intro[cid] < task_id
    return mask


def predict(model: ClassifierModel, inputs: np.ndarray) -> np.ndarray:
    """Argmax over all current logits; ties go to the lowest class id."""
    if not model.head:
        raise UsageError("cannot predict with an empty head")
    logits = model.logits(np.atleast_2d(np.asarray(inputs, dtype=np.float64)))
    return np.argmax(logits, axis=1)
