"""The continual-learning engine.

Per-task SGD fine-tuning, the iterative merge loop (plain and
Fisher-weighted), post-hoc classifier alignment from per-class feature
statistics, and the comparator strategies (sequential fine-tuning, EWC,
prototype classifier, joint training).
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, ParamSet, Tensor
from .errors import InputError, NumericalError, UsageError
from .fisher import FisherDiag, estimate_fisher_exact
from .merge import (
    DEFAULT_EMA_BETA,
    DEFAULT_EPSILON,
    EmaState,
    cofima_merge,
    coma_merge,
    ema_admit_entries,
    ema_debiased,
    ema_init,
    ema_update,
    uniform_running_avg,
    wise_ft_merge,
)
from .metrics import accuracy, inc_acc, last_acc
from .model import ClassifierModel, MlpConfig, expand_head, init_model, predict, shared_param_mask
from .taskstream import LabeledDataset, TaskStream

TRAIN_STRATEGIES = (
    "seq_ft",
    "coma",
    "cofima",
    "uniform_running",
    "wise_ft_theta0",
    "wise_ft_prev",
    "ema",
    "ewc",
    "prototype",
    "joint",
)

INIT_POLICIES = ("prev_star", "theta0")


@dataclass(frozen=True)
class TrainConfig:
    lr_backbone: float = 0.02
    lr_head: float = 0.2
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    lam: float = 0.5
    strategy: str = "cofima"
    ewc_lambda: float = 0.0
    ca_enabled: bool = False
    ca_samples_per_class: int = 64
    ca_temperature: float = 25.0
    ca_final_only: bool = False
    epsilon: float = DEFAULT_EPSILON
    ema_beta: float = DEFAULT_EMA_BETA
    init_policy: str = "prev_star"

    def __post_init__(self):
        if self.lr_backbone <= 0 or self.lr_head <= 0:
            raise InputError("learning rates must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise InputError("lambda must lie in [0, 1]")
        if self.strategy not in TRAIN_STRATEGIES:
            raise InputError(f"unknown strategy {self.strategy!r}")
        if self.ewc_lambda < 0:
            raise InputError("ewc_lambda must be >= 0")
        if self.ca_samples_per_class < 1:
            raise InputError("ca_samples_per_class must be >= 1")
        if self.init_policy not in INIT_POLICIES:
            raise InputError(f"init_policy must be one of {INIT_POLICIES}")
        if self.seed < 0:
            raise InputError("seed must be a nonnegative integer")


@dataclass(frozen=True)
class ClassStats:
    """Feature-space Gaussian summary of one class: mean and PSD covariance."""

    mean: np.ndarray
    cov: np.ndarray


@dataclass
class ExperimentState:
    """Mutable loop state of one continual run (exposed via keep_history)."""

    theta_star: ParamSet | None = None
    fisher_star: FisherDiag | None = None
    class_stats: dict[int, ClassStats] = field(default_factory=dict)
    ema: EmaState | None = None
    ewc_anchor: ParamSet | None = None
    ewc_fisher: FisherDiag | None = None


@dataclass(frozen=True)
class EvalRecord:
    predictions: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class ExperimentReport:
    strategy: str
    lam: float
    seed: int
    acc_seen: tuple[float, ...]                       # pooled accuracy after each task
    task_matrix: tuple[tuple[float, ...], ...]        # [t][s]: accuracy on task s's test after task t
    last_acc: float
    inc_acc: float
    config_hash: str
    wall_times: tuple[float, ...]
    merge_counts: tuple[int, ...]
    eval_records: tuple[EvalRecord, ...] = ()

    def same_numbers(self, other: "ExperimentReport") -> bool:
        """Bit-exact comparison of the measured quantities (labels aside)."""
        return (
            self.acc_seen == other.acc_seen
            and self.task_matrix == other.task_matrix
            and self.last_acc == other.last_acc
            and self.inc_acc == other.inc_acc
        )


@dataclass(frozen=True)
class PenaltySpec:
    anchor: ParamSet
    fisher: FisherDiag
    strength: float


def _fingerprint(*parts) -> str:
    digest = hashlib.sha256(repr(parts).encode("utf-8")).hexdigest()
    return digest[:12]


def _task_seed(seed: int, salt: int, task_id: int) -> int:
    return int(np.random.SeedSequence((seed, salt, task_id)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Training


def ewc_penalty(theta, theta_anchor: ParamSet, fisher_anchor: FisherDiag, ewc_lambda: float):
    """Quadratic pull toward the anchor, weighted by its Fisher:

        (ewc_lambda / 2) * sum_j F_j * (theta_j - anchor_j)^2

    over the entries common to theta and the anchor.  Accepts a ParamSet
    (returns a float) or a dict of taped Tensors (returns a Tensor, so the
    term is differentiable through theta).
    """
    if ewc_lambda < 0:
        raise InputError("ewc_lambda must be >= 0")
    theta_anchor.require_aligned(fisher_anchor, context="anchor/Fisher")
    if isinstance(theta, ParamSet):
        tape = GradTape()
        nodes = {n: tape.param(n, a) for n, a in theta.items()}
        return float(_ewc_penalty_node(nodes, theta_anchor, fisher_anchor, ewc_lambda).data)
    return _ewc_penalty_node(theta, theta_anchor, fisher_anchor, ewc_lambda)


def _ewc_penalty_node(
    nodes: dict[str, Tensor], anchor: ParamSet, fisher: FisherDiag, strength: float
) -> Tensor:
    tape = next(iter(nodes.values())).tape
    total: Tensor | None = None
    for name in anchor.names:
        if name not in nodes:
            continue
        diff = ad.sub(nodes[name], tape.constant(anchor[name]))
        term = ad.tsum(ad.mul(tape.constant(fisher[name]), ad.mul(diff, diff)))
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = tape.constant(0.0)
    return ad.scale(total, 0.5 * strength)


def train_task(
    model: ClassifierModel,
    dataset: LabeledDataset,
    config: TrainConfig,
    *,
    penalty: PenaltySpec | None = None,
    on_step: Callable[[ParamSet], None] | None = None,
) -> ParamSet:
    """Minibatch SGD on cross-entropy (plus an optional anchored quadratic
    penalty), with separate learning rates for backbone and head entries.

    Shuffling is seeded from config.seed, so the result is a pure function
    of (model, dataset, config).
    """
    if model.num_classes < 1:
        raise UsageError("expand the head before training")
    if len(dataset) < 1:
        raise InputError("cannot train on an empty dataset")
    params = model.params
    names = params.names
    lrs = [config.lr_head if n.startswith("head.") else config.lr_backbone for n in names]
    rng = np.random.default_rng((config.seed, 809))
    n = len(dataset)
    for _epoch in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            tape = GradTape()
            nodes = tape.watch(params)
            logits = model.logits_on_tape(nodes, dataset.features[idx])
            loss = ad.softmax_cross_entropy(logits, dataset.labels[idx])
            if penalty is not None and penalty.strength > 0.0:
                loss = ad.add(loss, _ewc_penalty_node(nodes, penalty.anchor, penalty.fisher, penalty.strength))
            grads = tape.backward(loss)
            params = ParamSet._from_sorted(
                names, [params[nm] - lr * grads[nm] for nm, lr in zip(names, lrs)]
            )
            if on_step is not None:
                on_step(params)
    return params


# ---------------------------------------------------------------------------
# Classifier alignment


def collect_class_stats(model: ClassifierModel, dataset: LabeledDataset) -> dict[int, ClassStats]:
    """Per-class feature mean/covariance under the model's current backbone.

    Covariances are symmetrized and eigenvalue-clipped at zero, so later
    Cholesky factorization only needs the small diagonal regularizer.
    """
    feats = model.features(dataset.features)
    out: dict[int, ClassStats] = {}
    for cid in dataset.class_set:
        rows = feats[dataset.labels == cid]
        mu = rows.mean(axis=0)
        centered = rows - mu
        cov = centered.T @ centered / rows.shape[0]
        cov = 0.5 * (cov + cov.T)
        w, v = np.linalg.eigh(cov)
        if w.size and w.min() < 0.0:
            cov = (v * np.maximum(w, 0.0)) @ v.T
            cov = 0.5 * (cov + cov.T)
        out[int(cid)] = ClassStats(mean=mu, cov=cov)
    return out


COV_REGULARIZER = 1e-6


def classifier_alignment(
    model: ClassifierModel,
    class_stats: dict[int, ClassStats],
    config: TrainConfig,
    *,
    seed: int | None = None,
) -> ParamSet:
    """Retrain only the head on features sampled from saved class Gaussians.

    Draws ca_samples_per_class per class via Cholesky of (cov + 1e-6 I),
    then runs SGD on cross-entropy over length-normalized logits (each row
    scaled to norm ca_temperature).  Returns the head-only ParamSet; the
    backbone is untouched.
    """
    if model.num_classes < 1:
        raise UsageError("alignment needs a non-empty head")
    missing = [r.class_id for r in model.head if r.class_id not in class_stats]
    if missing:
        raise UsageError(f"missing class statistics for classes {missing}")
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng((seed, 613))
    feat_dim = model.config.feature_dim
    xs, ys = [], []
    for row in model.head:
        stats = class_stats[row.class_id]
        cov = stats.cov + COV_REGULARIZER * np.eye(feat_dim)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"covariance for class {row.class_id} is not PSD") from exc
        z = rng.normal(size=(config.ca_samples_per_class, feat_dim))
        xs.append(stats.mean + z @ chol.T)
        ys.extend([row.class_id] * config.ca_samples_per_class)
    features = np.concatenate(xs)
    labels = np.array(ys)

    head_params = ParamSet({n: a for n, a in model.params.items() if n.startswith("head.")})
    names = head_params.names
    n = features.shape[0]
    for _epoch in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            tape = GradTape()
            nodes = tape.watch(head_params)
            rows = [(nodes[f"head.c{r.class_id:04d}.weight"], nodes[f"head.c{r.class_id:04d}.bias"]) for r in model.head]
            logits = ad.head_logits(tape.constant(features[idx]), rows)
            loss = ad.softmax_cross_entropy(
                ad.row_normalize_scale(logits, config.ca_temperature), labels[idx]
            )
            grads = tape.backward(loss)
            head_params = ParamSet._from_sorted(
                names, [head_params[nm] - config.lr_head * grads[nm] for nm in names]
            )
    return head_params


# ---------------------------------------------------------------------------
# Evaluation helpers


def _evaluate(model: ClassifierModel, tests: list[LabeledDataset]) -> tuple[float, list[float], EvalRecord]:
    feats = np.concatenate([ds.features for ds in tests])
    labels = np.concatenate([ds.labels for ds in tests])
    preds = predict(model, feats)
    pooled = accuracy(preds, labels)
    per_task = []
    off = 0
    for ds in tests:
        size = len(ds)
        per_task.append(accuracy(preds[off : off + size], ds.labels))
        off += size
    return pooled, per_task, EvalRecord(predictions=preds, labels=labels)


# ---------------------------------------------------------------------------
# Strategy runners


def run_continual(
    stream: TaskStream,
    config: TrainConfig,
    model_config: MlpConfig,
    *,
    config_hash: str | None = None,
    keep_history: bool = False,
):
    """Run the full task loop for the configured strategy.

    Per task: expand the head, fine-tune from the carried parameters,
    apply the strategy's merge rule once, optionally align the classifier,
    and evaluate on the union of all seen test sets.

    Returns the ExperimentReport, or (report, history) with keep_history.
    """
    if config.strategy == "prototype":
        report = prototype_classifier(stream, init_model(model_config), seed=config.seed, config_hash=config_hash)
        return (report, []) if keep_history else report
    if config.strategy == "joint":
        report = joint_training(stream, config, model_config, config_hash=config_hash)
        return (report, []) if keep_history else report

    chash = config_hash if config_hash is not None else _fingerprint(config, model_config)
    base = init_model(model_config)
    theta0 = base.params                       # pre-task parameters, backbone only
    structure = base
    state = ExperimentState()
    theta_prev_live: ParamSet | None = None    # raw fine-tuned weights of the previous task
    acc_seen: list[float] = []
    task_matrix: list[tuple[float, ...]] = []
    wall: list[float] = []
    merge_counts: list[int] = []
    records: list[EvalRecord] = []
    history: list[dict] = []
    seen_tests: list[LabeledDataset] = []

    for t, (train, test) in enumerate(stream, start=1):
        t0 = time.perf_counter()
        carry = _carry_params(config, state, theta_prev_live, theta0, structure)
        structure = expand_head(structure.with_params(carry), list(train.class_set), t)
        mask = shared_param_mask(structure, t)

        if config.strategy == "ema":
            admit_target = structure.params
            state.ema = (
                ema_init(admit_target, config.ema_beta)
                if state.ema is None
                else ema_admit_entries(state.ema, admit_target)
            )

            def on_step(p: ParamSet):
                state.ema = ema_update(state.ema, p)

        else:
            on_step = None

        penalty = None
        if config.strategy == "ewc" and state.ewc_anchor is not None and config.ewc_lambda > 0:
            penalty = PenaltySpec(state.ewc_anchor, state.ewc_fisher, config.ewc_lambda)

        task_cfg = replace(config, seed=_task_seed(config.seed, 1009, t))
        theta_t = train_task(structure, train, task_cfg, penalty=penalty, on_step=on_step)
        model_t = structure.with_params(theta_t)

        fisher_t: FisherDiag | None = None
        merges = 0
        if t == 1:
            theta_star = theta_t
        elif config.strategy in ("seq_ft", "ewc"):
            theta_star = theta_t
        elif config.strategy == "coma":
            theta_star = coma_merge(theta_t, state.theta_star, config.lam, mask)
            merges = 1
        elif config.strategy == "cofima":
            fisher_t = estimate_fisher_exact(model_t, train)
            theta_star = cofima_merge(
                theta_t, fisher_t, state.theta_star, state.fisher_star,
                config.lam, config.epsilon, mask,
            )
            merges = 1
        elif config.strategy == "uniform_running":
            theta_star = uniform_running_avg(theta_t, state.theta_star, t, mask)
            merges = 1
        elif config.strategy == "wise_ft_theta0":
            anchored = {n: (m and n in theta0) for n, m in mask.items()}
            theta_star = wise_ft_merge(theta_t, theta0, config.lam, anchored)
            merges = 1
        elif config.strategy == "wise_ft_prev":
            theta_star = wise_ft_merge(theta_t, state.theta_star, config.lam, mask)
            merges = 1
        elif config.strategy == "ema":
            theta_star = ema_debiased(state.ema)
            merges = 1
        else:  # pragma: no cover - guarded by TrainConfig validation
            raise InputError(f"unhandled strategy {config.strategy!r}")

        if config.strategy == "cofima":
            state.fisher_star = estimate_fisher_exact(structure.with_params(theta_star), train)
        if config.strategy == "ewc":
            state.ewc_anchor = theta_t
            state.ewc_fisher = estimate_fisher_exact(model_t, train)

        state.theta_star = theta_star
        theta_prev_live = theta_t
        deployed = structure.with_params(theta_star)

        eval_params = theta_star
        if config.ca_enabled:
            state.class_stats.update(collect_class_stats(deployed, train))
            if not config.ca_final_only or t == len(stream):
                head = classifier_alignment(
                    deployed, state.class_stats, config, seed=_task_seed(config.seed, 1013, t)
                )
                eval_params = theta_star.replace(dict(head.items()))

        seen_tests.append(test)
        pooled, per_task, record = _evaluate(structure.with_params(eval_params), seen_tests)
        acc_seen.append(pooled)
        task_matrix.append(tuple(per_task))
        records.append(record)
        merge_counts.append(merges)
        wall.append(time.perf_counter() - t0)
        if keep_history:
            history.append(
                {
                    "task": t,
                    "theta_t": theta_t,
                    "theta_star": theta_star,
                    "eval_params": eval_params,
                    "fisher_t": fisher_t,
                    "fisher_star": state.fisher_star,
                    "mask": mask,
                }
            )

    report = ExperimentReport(
        strategy=config.strategy,
        lam=config.lam,
        seed=config.seed,
        acc_seen=tuple(acc_seen),
        task_matrix=tuple(task_matrix),
        last_acc=last_acc(acc_seen),
        inc_acc=inc_acc(acc_seen),
        config_hash=chash,
        wall_times=tuple(wall),
        merge_counts=tuple(merge_counts),
        eval_records=tuple(records),
    )
    return (report, history) if keep_history else report


def _carry_params(
    config: TrainConfig,
    state: ExperimentState,
    theta_prev_live: ParamSet | None,
    theta0: ParamSet,
    structure: ClassifierModel,
) -> ParamSet:
    """Parameters each task's fine-tuning starts from."""
    if state.theta_star is None:
        return theta0
    if config.strategy == "ema":
        return theta_prev_live
    if config.init_policy == "theta0":
        entries = {n: a for n, a in state.theta_star.items() if n.startswith("head.")}
        entries.update(dict(theta0.items()))
        return ParamSet(entries)
    return state.theta_star


def prototype_classifier(
    stream: TaskStream,
    backbone: ClassifierModel,
    *,
    seed: int = 0,
    config_hash: str | None = None,
) -> ExperimentReport:
    """Cosine-similarity classifier over frozen-backbone class means.

    No training: each class keeps the mean feature of its train split;
    prediction is the highest cosine similarity among seen prototypes.
    Zero-norm features or prototypes are never selected unless every
    candidate is degenerate, in which case the lowest class id wins.
    """
    chash = config_hash if config_hash is not None else _fingerprint("prototype", backbone.config, seed)
    protos: list[np.ndarray] = []
    proto_ids: list[int] = []
    acc_seen: list[float] = []
    task_matrix: list[tuple[float, ...]] = []
    records: list[EvalRecord] = []
    wall: list[float] = []
    seen_tests: list[LabeledDataset] = []
    for train, test in stream:
        t0 = time.perf_counter()
        feats = backbone.features(train.features)
        for cid in train.class_set:
            protos.append(feats[train.labels == cid].mean(axis=0))
            proto_ids.append(int(cid))
        seen_tests.append(test)
        X = np.concatenate([ds.features for ds in seen_tests])
        y = np.concatenate([ds.labels for ds in seen_tests])
        preds = _cosine_predict(np.stack(protos), np.array(proto_ids), backbone.features(X))
        pooled = accuracy(preds, y)
        per_task = []
        off = 0
        for ds in seen_tests:
            per_task.append(accuracy(preds[off : off + len(ds)], ds.labels))
            off += len(ds)
        acc_seen.append(pooled)
        task_matrix.append(tuple(per_task))
        records.append(EvalRecord(predictions=preds, labels=y))
        wall.append(time.perf_counter() - t0)
    return ExperimentReport(
        strategy="prototype",
        lam=0.0,
        seed=seed,
        acc_seen=tuple(acc_seen),
        task_matrix=tuple(task_matrix),
        last_acc=last_acc(acc_seen),
        inc_acc=inc_acc(acc_seen),
        config_hash=chash,
        wall_times=tuple(wall),
        merge_counts=tuple(0 for _ in acc_seen),
        eval_records=tuple(records),
    )


def _cosine_predict(protos: np.ndarray, proto_ids: np.ndarray, feats: np.ndarray) -> np.ndarray:
    pnorm = np.linalg.norm(protos, axis=1)
    fnorm = np.linalg.norm(feats, axis=1)
    sims = feats @ protos.T
    denom = np.outer(fnorm, pnorm)
    valid = denom > 0.0
    sims = np.where(valid, sims / np.where(valid, denom, 1.0), -np.inf)
    order = np.argsort(proto_ids, kind="stable")
    best = order[np.argmax(sims[:, order], axis=1)]
    return proto_ids[best]


def joint_training(
    stream: TaskStream,
    config: TrainConfig,
    model_config: MlpConfig,
    *,
    config_hash: str | None = None,
) -> ExperimentReport:
    """Upper-bound reference: one run on the union of every train split."""
    chash = config_hash if config_hash is not None else _fingerprint("joint", config, model_config)
    t0 = time.perf_counter()
    all_classes = list(stream.all_classes())
    train_feats = np.concatenate([train.features for train, _ in stream])
    train_labels = np.concatenate([train.labels for train, _ in stream])
    pooled_train = LabeledDataset(train_feats, train_labels, tuple(all_classes))
    model = expand_head(init_model(model_config), all_classes, 1)
    task_cfg = replace(config, seed=_task_seed(config.seed, 1009, 1))
    theta = train_task(model, pooled_train, task_cfg)
    eval_params = theta
    if config.ca_enabled:
        deployed = model.with_params(theta)
        stats = collect_class_stats(deployed, pooled_train)
        head = classifier_alignment(deployed, stats, config, seed=_task_seed(config.seed, 1013, 1))
        eval_params = theta.replace(dict(head.items()))
    pooled, per_task, record = _evaluate(
        model.with_params(eval_params), [test for _, test in stream]
    )
    wall = time.perf_counter() - t0
    return ExperimentReport(
        strategy="joint",
        lam=config.lam,
        seed=config.seed,
        acc_seen=(pooled,),
        task_matrix=(tuple(per_task),),
        last_acc=pooled,
        inc_acc=pooled,
        config_hash=chash,
        wall_times=(wall,),
        merge_counts=(0,),
        eval_records=(record,),
    )
