"""Weight-space combination rules.

All rules are pure element-wise functions over aligned ParamSets.  A mask
(name -> bool) selects the parameters shared across tasks; entries outside
the mask (head rows a new task just introduced) are copied verbatim from
the current fine-tuned model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import ParamSet
from .errors import AlignmentError, InputError, UsageError
from .fisher import FisherDiag, fisher_floor

STRATEGIES = (
    "coma",
    "cofima",
    "uniform_running",
    "batch_average",
    "wise_ft_theta0",
    "wise_ft_prev",
    "ema",
)

DEFAULT_LAMBDA = 0.5
DEFAULT_EPSILON = 1e-8
DEFAULT_EMA_BETA = 0.999


@dataclass(frozen=True)
class MergeSpec:
    """Everything that determines a merge: rule, weighting, head mask."""

    strategy: str
    lam: float = DEFAULT_LAMBDA
    epsilon: float = DEFAULT_EPSILON
    mask: Mapping[str, bool] | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InputError(f"unknown merge strategy {self.strategy!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise InputError("lambda must lie in [0, 1]")
        if self.epsilon <= 0:
            raise InputError("epsilon must be > 0")


@dataclass(frozen=True)
class EmaState:
    running: ParamSet
    step: int
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise InputError("beta must lie in [0, 1)")
        if self.step < 0:
            raise InputError("step must be >= 0")


def _resolve_mask(theta_t: ParamSet, mask: Mapping[str, bool] | None) -> dict[str, bool]:
    if mask is None:
        return {name: True for name in theta_t.names}
    unknown = set(mask) - set(theta_t.names)
    if unknown:
        raise AlignmentError(f"mask names {sorted(unknown)} not present in the model")
    missing = set(theta_t.names) - set(mask)
    if missing:
        raise AlignmentError(f"mask is missing entries {sorted(missing)}")
    return {name: bool(mask[name]) for name in theta_t.names}


def _masked_pair(theta_t: ParamSet, other: ParamSet, name: str) -> tuple[np.ndarray, np.ndarray]:
    if name not in other:
        raise AlignmentError(f"operand is missing shared entry {name!r}")
    a, b = theta_t[name], other[name]
    if a.shape != b.shape:
        raise AlignmentError(f"entry {name!r} has shapes {a.shape} vs {b.shape}")
    return a, b


def coma_merge(
    theta_t: ParamSet,
    theta_prev_star: ParamSet,
    lam: float,
    mask: Mapping[str, bool] | None = None,
) -> ParamSet:
    """Convex combination lam*theta_t + (1-lam)*theta_prev_star on shared
    entries; new-head entries are taken from theta_t bit-unchanged.

    lam in {0, 1} short-circuits to an exact copy, so the degenerate cases
    are bit-identical to their operand.
    """
    if not 0.0 <= lam <= 1.0:
        raise InputError("lambda must lie in [0, 1]")
    resolved = _resolve_mask(theta_t, mask)
    out = {}
    for name, arr in theta_t.items():
        if not resolved[name]:
            out[name] = arr
            continue
        a, b = _masked_pair(theta_t, theta_prev_star, name)
        if lam == 1.0:
            out[name] = a
        elif lam == 0.0:
            out[name] = b
        else:
            out[name] = lam * a + (1.0 - lam) * b
    return ParamSet(out)


def cofima_merge(
    theta_t: ParamSet,
    fisher_t: FisherDiag,
    theta_prev_star: ParamSet,
    fisher_prev_star: FisherDiag,
    lam: float,
    epsilon: float = DEFAULT_EPSILON,
    mask: Mapping[str, bool] | None = None,
) -> ParamSet:
    """Fisher-weighted combination per shared entry:

        (lam*F_t*theta_t + (1-lam)*F_prev*theta_prev)
        / (lam*F_t + (1-lam)*F_prev)

    Both Fisher operands are floored at epsilon first, which keeps the
    denominator >= epsilon and makes zero-Fisher entries degrade to the
    plain convex combination (the Fisher cancels out of the ratio).
    """
    if not 0.0 <= lam <= 1.0:
        raise InputError("lambda must lie in [0, 1]")
    if epsilon <= 0:
        raise InputError("epsilon must be > 0")
    resolved = _resolve_mask(theta_t, mask)
    f_t = fisher_floor(fisher_t, epsilon)
    f_prev = fisher_floor(fisher_prev_star, epsilon)
    out = {}
    for name, arr in theta_t.items():
        if not resolved[name]:
            out[name] = arr
            continue
        a, b = _masked_pair(theta_t, theta_prev_star, name)
        _, fa = _masked_pair(theta_t, f_t, name)
        _, fb = _masked_pair(theta_t, f_prev, name)
        num = lam * (fa * a) + (1.0 - lam) * (fb * b)
        den = lam * fa + (1.0 - lam) * fb
        out[name] = num / den
    return ParamSet(out)


def uniform_running_avg(
    theta_t: ParamSet,
    theta_star_prev: ParamSet,
    t: int,
    mask: Mapping[str, bool] | None = None,
) -> ParamSet:
    """Running uniform mean: (1/t)*theta_t + (1 - 1/t)*theta_star_prev."""
    if t < 1:
        raise InputError("task index t must be >= 1")
    return coma_merge(theta_t, theta_star_prev, 1.0 / t, mask)


def batch_average(thetas: list[ParamSet]) -> ParamSet:
    """Element-wise mean of mutually aligned ParamSets."""
    if not thetas:
        raise InputError("batch_average needs at least one ParamSet")
    first = thetas[0]
    for other in thetas[1:]:
        first.require_aligned(other)
    out = {}
    for name, arr in first.items():
        acc = arr.copy()
        for other in thetas[1:]:
            acc = acc + other[name]
        out[name] = acc / len(thetas)
    return ParamSet(out)


def fisher_batch_average(
    thetas: list[ParamSet], fishers: list[FisherDiag], epsilon: float = DEFAULT_EPSILON
) -> ParamSet:
    """Fisher-precision-weighted mean: sum(F_t*theta_t) / sum(F_t).

    Fishers are floored at epsilon, so equal Fishers (including all-zero)
    reduce to the plain mean.
    """
    if not thetas:
        raise InputError("fisher_batch_average needs at least one ParamSet")
    if len(thetas) != len(fishers):
        raise InputError("need exactly one Fisher per ParamSet")
    first = thetas[0]
    for other in thetas[1:]:
        first.require_aligned(other)
    floored = [fisher_floor(f, epsilon) for f in fishers]
    for theta, f in zip(thetas, floored):
        theta.require_aligned(f, context="theta/Fisher pair")
    out = {}
    for name, arr in first.items():
        num = floored[0][name] * arr
        den = floored[0][name].copy()
        for theta, f in zip(thetas[1:], floored[1:]):
            num = num + f[name] * theta[name]
            den = den + f[name]
        out[name] = num / den
    return ParamSet(out)


def wise_ft_merge(
    theta_ft: ParamSet,
    theta_anchor: ParamSet,
    lam: float,
    mask: Mapping[str, bool] | None = None,
) -> ParamSet:
    """Interpolate a fine-tuned model toward a fixed anchor.

    Same arithmetic as coma_merge; the strategy layer decides whether the
    anchor is the initial model or the previous merged model.
    """
    return coma_merge(theta_ft, theta_anchor, lam, mask)


def ema_init(theta: ParamSet, beta: float = DEFAULT_EMA_BETA) -> EmaState:
    """Fresh state: zero running average, step 0."""
    return EmaState(running=theta.map(np.zeros_like), step=0, beta=beta)


def ema_update(state: EmaState, theta_m: ParamSet) -> EmaState:
    """running <- beta*running + (1-beta)*theta_m; step <- step + 1."""
    state.running.require_aligned(theta_m, context="EMA state/theta")
    beta = state.beta
    running = state.running.zip_map(theta_m, lambda r, t: beta * r + (1.0 - beta) * t)
    return EmaState(running=running, step=state.step + 1, beta=beta)


def ema_debiased(state: EmaState) -> ParamSet:
    """running / (1 - beta**step); defined once at least one update ran."""
    if state.step < 1:
        raise UsageError("debiased EMA is undefined before the first update")
    corr = 1.0 - state.beta ** state.step
    return state.running.map(lambda r: r / corr)


def ema_admit_entries(state: EmaState, theta: ParamSet) -> EmaState:
    """Extend the running set with entries theta has but the state lacks.

    A new entry is admitted at value theta*(1 - beta**step) so the global
    debias correction returns exactly theta for it at admission time.
    Needed when the head grows between tasks.
    """
    known = set(state.running.names)
    corr = 1.0 - state.beta ** state.step
    additions = {
        name: corr * arr for name, arr in theta.items() if name not in known
    }
    if not additions:
        return state
    merged = dict(state.running.items())
    merged.update(additions)
    return EmaState(running=ParamSet(merged), step=state.step, beta=state.beta)
