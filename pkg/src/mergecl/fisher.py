"""Diagonal Fisher information estimation.

The estimate averages, over the data, the expected squared gradient of the
per-example class log-likelihood, with the label expectation taken under
the model's own predictive distribution.  The exact estimator enumerates
all classes; the Monte Carlo estimator samples labels instead.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, ParamSet
from .errors import InputError
from .model import ClassifierModel
from .taskstream import LabeledDataset


class FisherDiag(ParamSet):
    """ParamSet whose entries are nonnegative (squared-gradient averages)."""

    def __init__(self, entries):
        super().__init__(entries)
        for name, arr in self.items():
            if arr.size and float(arr.min()) < 0.0:
                raise InputError(f"Fisher entry {name!r} has negative values")

    @classmethod
    def _wrap(cls, ps: ParamSet) -> "FisherDiag":
        fd = object.__new__(cls)
        fd._names = ps._names
        fd._arrays = ps._arrays
        return fd


def _weighted_sq_grads(model: ClassifierModel, x_row: np.ndarray, weight_fn) -> ParamSet:
    """sum_k w_k * grad(log p(k|x))**2 with one forward pass, K backwards.

    weight_fn maps the predictive probabilities to per-class weights
    (the probabilities themselves for the exact estimator, empirical label
    frequencies for Monte Carlo).
    """
    tape = GradTape()
    nodes = tape.watch(model.params)
    lp = ad.log_prob(model.logits_on_tape(nodes, x_row[None, :]))
    probs = np.exp(lp.data[0])
    weights = weight_fn(probs / probs.sum())
    acc: ParamSet | None = None
    for k in range(model.num_classes):
        w = float(weights[k])
        if w == 0.0:
            continue
        grad = tape.backward(ad.pick_scalar(lp, 0, k))
        term = grad.map(lambda g, w=w: w * g * g)
        acc = term if acc is None else acc.zip_map(term, np.add)
    if acc is None:
        acc = model.params.map(np.zeros_like)
    return acc


def _accumulate(model: ClassifierModel, data: LabeledDataset, weight_fn_for) -> FisherDiag:
    if model.num_classes < 1:
        raise InputError("model head must cover at least one class")
    if len(data) < 1:
        raise InputError("Fisher estimation needs a non-empty dataset")
    total: ParamSet | None = None
    for i in range(len(data)):
        contrib = _weighted_sq_grads(model, data.features[i], weight_fn_for(i))
        total = contrib if total is None else total.zip_map(contrib, np.add)
    n = float(len(data))
    return FisherDiag._wrap(total.map(lambda a: a / n))


def estimate_fisher_exact(model: ClassifierModel, data: LabeledDataset) -> FisherDiag:
    """Exact class enumeration: the label expectation is computed in closed
    form by weighting each class's squared gradient with its probability."""
    return _accumulate(model, data, lambda i: (lambda probs: probs))


def estimate_fisher_mc(
    model: ClassifierModel, data: LabeledDataset, samples_per_point: int, seed: int
) -> FisherDiag:
    """Monte Carlo variant: labels are sampled from p(y|x) instead of
    enumerated, so the class weights become empirical frequencies."""
    if samples_per_point < 1:
        raise InputError("samples_per_point must be >= 1")
    rng = np.random.default_rng((seed, 523))

    def weight_fn_for(_i: int):
        def draw(probs: np.ndarray) -> np.ndarray:
            ys = rng.choice(probs.size, size=samples_per_point, p=probs)
            return np.bincount(ys, minlength=probs.size) / samples_per_point

        return draw

    return _accumulate(model, data, weight_fn_for)


def fisher_floor(f: FisherDiag, epsilon: float) -> FisherDiag:
    """Entry-wise max(entry, epsilon); idempotent."""
    if epsilon <= 0:
        raise InputError("epsilon must be > 0")
    return FisherDiag._wrap(f.map(lambda a: np.maximum(a, epsilon)))
