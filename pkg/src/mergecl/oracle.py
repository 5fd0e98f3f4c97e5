"""Exact quadratic testbed for the merge algebra.

A diagonal Gaussian log-likelihood is exactly a diagonal quadratic loss,
so a task here is (center, positive diagonal precision).  Its Fisher with
respect to the mean parameters is the precision itself, which makes every
merge rule checkable against a closed-form joint optimum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamSet
from .errors import InputError
from .fisher import FisherDiag
from .merge import cofima_merge, fisher_batch_average

_ENTRY = "theta"


@dataclass(frozen=True)
class QuadraticTask:
    center: np.ndarray       # mu
    precision: np.ndarray    # positive diagonal

    def __post_init__(self):
        mu = np.asarray(self.center, dtype=np.float64)
        a = np.asarray(self.precision, dtype=np.float64)
        if mu.shape != a.shape or mu.ndim != 1:
            raise InputError("center and precision must be 1-D vectors of equal length")
        if np.any(a <= 0):
            raise InputError("precision entries must be > 0")
        object.__setattr__(self, "center", mu)
        object.__setattr__(self, "precision", a)

    def loss(self, theta: np.ndarray) -> float:
        d = np.asarray(theta, dtype=np.float64) - self.center
        return float(0.5 * np.sum(self.precision * d * d))


def exact_joint_optimum(tasks: list[QuadraticTask]) -> np.ndarray:
    """argmin of the summed quadratics: (sum A_t mu_t) / (sum A_t)."""
    if not tasks:
        raise InputError("need at least one task")
    num = np.zeros_like(tasks[0].center)
    den = np.zeros_like(tasks[0].precision)
    for task in tasks:
        num = num + task.precision * task.center
        den = den + task.precision
    return num / den


def fisher_of_quadratic(task: QuadraticTask) -> FisherDiag:
    """The information carried about the center is the precision itself."""
    return FisherDiag({_ENTRY: task.precision})


def summed_loss(tasks: list[QuadraticTask], theta: np.ndarray) -> float:
    return sum(task.loss(theta) for task in tasks)


def _as_paramset(vec: np.ndarray) -> ParamSet:
    return ParamSet({_ENTRY: vec})


def iterate_fisher_weighted(tasks: list[QuadraticTask], lam: float) -> np.ndarray:
    """Run the iterative Fisher-weighted update over the task sequence.

    On quadratics each task's fine-tuned solution is its own center, and
    the Fisher at any point is the (position-independent) precision, so
    the recursion uses exact inputs throughout.
    """
    theta_star = _as_paramset(tasks[0].center)
    fisher_star = fisher_of_quadratic(tasks[0])
    for t in range(1, len(tasks)):
        theta_star = cofima_merge(
            _as_paramset(tasks[t].center),
            fisher_of_quadratic(tasks[t]),
            theta_star,
            fisher_star,
            lam,
        )
        fisher_star = fisher_of_quadratic(tasks[t])
    return theta_star[_ENTRY]


def iterate_plain_schedule(tasks: list[QuadraticTask], lambdas: list[float]) -> np.ndarray:
    """Plain (unweighted) iterative averaging with a per-step lambda."""
    theta = tasks[0].center
    for t in range(1, len(tasks)):
        lam = lambdas[t - 1]
        theta = lam * tasks[t].center + (1.0 - lam) * theta
    return theta


@dataclass(frozen=True)
class MergeOptimalityReport:
    batch_gap: float             # |fisher_batch_average - exact optimum|, max abs
    iterative_gap: float         # |iterative Fisher-weighted - exact optimum|, max abs
    iterative_loss: float        # summed loss of the iterative result
    optimum_loss: float          # summed loss of the exact optimum
    uniform_latest_loss: float   # latest task's loss at the uniform average
    recency_latest_loss: float   # latest task's loss at the lam=0.5 recency result

    @property
    def recency_beats_uniform_on_latest(self) -> bool:
        return self.recency_latest_loss <= self.uniform_latest_loss


def verify_merge_optimality(
    tasks: list[QuadraticTask], lam: float = 0.5
) -> MergeOptimalityReport:
    """Measure the gaps the closed-form theory predicts.

    (a) the batch Fisher-weighted mean must hit the exact joint optimum;
    (b) the two-term iterative rule equals it for T=2 at lam=0.5, and drifts
        toward recency for longer streams;
    (c) recency weighting lands closer to the latest task than the uniform
        average does.
    """
    if len(tasks) < 2:
        raise InputError("verify_merge_optimality needs at least two tasks")
    opt = exact_joint_optimum(tasks)
    thetas = [_as_paramset(task.center) for task in tasks]
    fishers = [fisher_of_quadratic(task) for task in tasks]
    batch = fisher_batch_average(thetas, fishers)[_ENTRY]
    iterative = iterate_fisher_weighted(tasks, lam)
    uniform = iterate_plain_schedule(tasks, [1.0 / t for t in range(2, len(tasks) + 1)])
    recency = iterate_plain_schedule(tasks, [0.5] * (len(tasks) - 1))
    latest = tasks[-1]
    return MergeOptimalityReport(
        batch_gap=float(np.max(np.abs(batch - opt))),
        iterative_gap=float(np.max(np.abs(iterative - opt))),
        iterative_loss=summed_loss(tasks, iterative),
        optimum_loss=summed_loss(tasks, opt),
        uniform_latest_loss=latest.loss(uniform),
        recency_latest_loss=latest.loss(recency),
    )
