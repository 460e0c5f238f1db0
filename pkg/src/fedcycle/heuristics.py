"""The five collaboration heuristics over siloed patient cohorts.

Single institution, centrally hosted (pooled data), ensembling of
single-institution models, single weight transfer (one pass over the
institutions, each trained to a validation plateau), and cyclical weight
transfer (round-robin visits of a fixed number of epochs). Every run is a
pure function of (config, split, seed).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import transport
from .data import Batch, Dataset, augment, normalize
from .nn import (LayerSpec, ModelState, OptimizerConfig, backward,
                 forward, fresh_opt_state, init_model, loss, opt_step)
from .partition import Split, pool
from .schedule import (STOP, ExpDecayPolicy, PlateauPolicy,
                       PlateauState, exp_decay_lr, observe)


@dataclass(frozen=True)
class ExperimentConfig:
    model_specs: list
    optimizer: OptimizerConfig
    plateau: PlateauPolicy
    batch_size: int = 32
    augment_sigma: float = 0.0
    seed: int = 0
    carry_opt_state: bool = True
    exp_decay: ExpDecayPolicy | None = None  # overrides plateau-driven lr when set
    top_k: int = 1
    max_epochs: int = 5000
    transport: str = "memory"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(frozen=True)
class MetricsRow:
    global_epoch: int
    phase: str
    institution: int | None
    learning_rate: float
    train_accuracy: float
    validation_accuracy: float
    validation_loss: float


@dataclass
class RunResult:
    models: list
    metrics: list
    train_accuracy: float
    validation_accuracy: float
    test_accuracy: float
    test_top_k: float
    top_k: int
    transfers: int = 0
    optimizer_steps: int = 0
    extra: dict = field(default_factory=dict)


def predict_proba(model: ModelState, features: np.ndarray) -> np.ndarray:
    """Eval-mode output probabilities: (n, 1) sigmoid or (n, C) softmax."""
    prev = model.mode
    model.mode = "eval"
    try:
        return forward(model, features).probs
    finally:
        model.mode = prev


def _prob_matrix(probs: np.ndarray) -> np.ndarray:
    if probs.shape[1] == 1:
        p = probs[:, 0]
        return np.stack([1.0 - p, p], axis=1)
    return probs


def accuracy_from_probs(probs: np.ndarray, labels: np.ndarray, k: int = 1) -> dict:
    """top1/topk from a probability table; sigmoid column uses the >= 0.5
    rule, multiclass argmax ties go to the lowest class index."""
    labels = np.asarray(labels)
    if probs.shape[1] == 1:
        pred = (probs[:, 0] >= 0.5).astype(np.int64)
        num_classes = 2
    else:
        pred = np.argmax(probs, axis=1)
        num_classes = probs.shape[1]
    if k > num_classes:
        raise ValueError(f"k={k} exceeds {num_classes} classes")
    top1 = float(np.mean(pred == labels))
    if k == 1:
        topk = top1
    else:
        table = _prob_matrix(probs)
        ranked = np.argsort(-table, axis=1, kind="stable")[:, :k]
        topk = float(np.mean(np.any(ranked == labels[:, None], axis=1)))
    return {"top1": top1, "topk": topk}


def evaluate(model: ModelState, cohort: Dataset, k: int = 1) -> dict:
    probs = predict_proba(model, cohort.features)
    return accuracy_from_probs(probs, cohort.labels, k)


def _val_metrics(model: ModelState, validation: Dataset) -> tuple[float, float]:
    probs = predict_proba(model, validation.features)
    acc = accuracy_from_probs(probs, validation.labels)["top1"]
    return acc, loss(probs, validation.labels, model, 0.0)


def _build_model(cfg: ExperimentConfig) -> ModelState:
    rng = np.random.default_rng([cfg.seed, 0])
    return init_model(cfg.model_specs, cfg.optimizer, rng)


def _train_rng(cfg: ExperimentConfig) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 1])


def train_on(model: ModelState, cohort: Dataset, epochs: int,
             cfg: ExperimentConfig, lr: float, rng: np.random.Generator) -> int:
    """Train `epochs` full passes in shuffled mini-batches; returns the
    number of optimizer steps taken. Augmentation noise is redrawn every
    epoch. The cohort is expected to be normalized already."""
    n = len(cohort)
    steps = 0
    for _ in range(epochs):
        batch = augment(Batch(cohort.features, cohort.labels), cfg.augment_sigma, rng)
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            fp = forward(model, batch.features[idx], rng=rng)
            grads = backward(model, fp, batch.labels[idx], cfg.optimizer.l2_coeff)
            opt_step(model, grads, cfg.optimizer, lr)
            steps += 1
    return steps


class _Recorder:
    """Per-epoch metrics plus a guard that test data is scored exactly once."""

    def __init__(self, cfg: ExperimentConfig, validation: Dataset, test: Dataset):
        self.cfg = cfg
        self.validation = validation
        self.test = test
        self.rows = []
        self.test_evaluations = 0

    def record(self, model, global_epoch, phase, institution, lr, cohort) -> float:
        train_acc = evaluate(model, cohort)["top1"]
        val_acc, val_loss = _val_metrics(model, self.validation)
        self.rows.append(MetricsRow(global_epoch, phase, institution, lr,
                                    train_acc, val_acc, val_loss))
        return val_loss

    def finish(self, model, models=None, transfers=0, steps=0, extra=None) -> RunResult:
        self.test_evaluations += 1
        assert self.test_evaluations == 1, "test cohort must be scored exactly once"
        scores = evaluate(model, self.test, self.cfg.top_k)
        last = self.rows[-1]
        return RunResult(
            models=models if models is not None else [model],
            metrics=self.rows,
            train_accuracy=last.train_accuracy,
            validation_accuracy=last.validation_accuracy,
            test_accuracy=scores["top1"],
            test_top_k=scores["topk"],
            top_k=self.cfg.top_k,
            transfers=transfers,
            optimizer_steps=steps,
            extra=extra or {},
        )


def _current_lr(cfg: ExperimentConfig, state: PlateauState, epoch_index: int) -> float:
    if cfg.exp_decay is not None:
        return exp_decay_lr(epoch_index, cfg.optimizer.learning_rate, cfg.exp_decay)
    return state.current_lr


def _normalized_cohorts(split: Split):
    insts = [normalize(c)[0] for c in split.institutions]
    val = normalize(split.validation)[0]
    test = normalize(split.test)[0]
    return insts, val, test


def _plateau_run(cfg: ExperimentConfig, cohort: Dataset, validation: Dataset,
                 test: Dataset, institution: int | None) -> RunResult:
    """Shared loop for the single-cohort heuristics (single, central)."""
    model = _build_model(cfg)
    rng = _train_rng(cfg)
    policy = replace(cfg.plateau, patience_scale=1)
    state = PlateauState.fresh(cfg.optimizer.learning_rate)
    rec = _Recorder(cfg, validation, test)
    steps = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = _current_lr(cfg, state, epoch - 1)
        phase = state.phase
        steps += train_on(model, cohort, 1, cfg, lr, rng)
        val_loss = rec.record(model, epoch, phase, institution, lr, cohort)
        if observe(state, policy, val_loss).kind == STOP:
            break
    return rec.finish(model, steps=steps)


def run_single_institution(cfg: ExperimentConfig, split: Split, index: int) -> RunResult:
    if not (0 <= index < len(split.institutions)):
        raise IndexError(f"institution index {index} out of range")
    insts, val, test = _normalized_cohorts(split)
    return _plateau_run(cfg, insts[index], val, test, institution=index)


def run_central(cfg: ExperimentConfig, split: Split) -> RunResult:
    pooled = normalize(pool(split))[0]
    _, val, test = _normalized_cohorts(split)
    return _plateau_run(cfg, pooled, val, test, institution=None)


def run_ensemble(cfg: ExperimentConfig, split: Split) -> RunResult:
    """Train one model per institution (seeds seed+i), average output
    probabilities sample-wise, then threshold/argmax."""
    insts, val, test = _normalized_cohorts(split)
    members, rows = [], []
    steps = 0
    for i in range(len(split.institutions)):
        member_cfg = replace(cfg, seed=cfg.seed + i)
        res = _plateau_run(member_cfg, insts[i], val, test, institution=i)
        members.append(res.models[0])
        rows.extend(res.metrics)
        steps += res.optimizer_steps

    def avg_probs(cohort):
        return np.mean([_prob_matrix(predict_proba(m, cohort.features))
                        for m in members], axis=0)

    val_scores = accuracy_from_probs(avg_probs(val), val.labels)
    test_scores = accuracy_from_probs(avg_probs(test), test.labels, cfg.top_k)
    pooled = normalize(pool(split))[0]
    train_scores = accuracy_from_probs(avg_probs(pooled), pooled.labels)
    return RunResult(
        models=members,
        metrics=rows,
        train_accuracy=train_scores["top1"],
        validation_accuracy=val_scores["top1"],
        test_accuracy=test_scores["top1"],
        test_top_k=test_scores["topk"],
        top_k=cfg.top_k,
        optimizer_steps=steps,
    )


def ensemble_predict(models, features: np.ndarray) -> np.ndarray:
    return np.mean([_prob_matrix(predict_proba(m, features)) for m in models], axis=0)


def _handoff(model: ModelState, cfg: ExperimentConfig, channel, *,
             origin: int, destination: int, global_epoch: int) -> ModelState:
    data = transport.serialize(model, global_epoch=global_epoch, origin=origin,
                               carry_opt_state=cfg.carry_opt_state)
    delivered = channel.handoff(data, origin=origin, destination=destination,
                                global_epoch=global_epoch)
    new_model, _ = transport.deserialize(delivered, model.specs)
    if not cfg.carry_opt_state:
        new_model.opt_state = fresh_opt_state(cfg.optimizer.kind, new_model.params)
    return new_model


def run_single_weight_transfer(cfg: ExperimentConfig, split: Split) -> RunResult:
    """Visit institutions once, in index order, training each to a
    validation plateau (per-institution patience, no decay mid-visit); the
    decay ladder advances at each transfer; plateau at the last institution
    terminates."""
    insts, val, test = _normalized_cohorts(split)
    k = len(insts)
    model = _build_model(cfg)
    rng = _train_rng(cfg)
    policy = replace(cfg.plateau, patience_scale=1)
    state = PlateauState.fresh(cfg.optimizer.learning_rate)
    channel = transport.make_channel(cfg.transport)
    rec = _Recorder(cfg, val, test)
    steps = transfers = 0
    global_epoch = 0
    try:
        for i in range(k):
            while global_epoch < cfg.max_epochs:
                global_epoch += 1
                lr = _current_lr(cfg, state, global_epoch - 1)
                phase = state.phase
                steps += train_on(model, insts[i], 1, cfg, lr, rng)
                val_loss = rec.record(model, global_epoch, phase, i, lr, insts[i])
                action = observe(state, policy, val_loss)
                if action.kind != "continue":
                    break  # plateau reached (decay applied if any remained)
            if i < k - 1:
                model = _handoff(model, cfg, channel, origin=i, destination=i + 1,
                                 global_epoch=global_epoch)
                transfers += 1
                state.epochs_since_improve = 0
    finally:
        channel.close()
    return rec.finish(model, transfers=transfers, steps=steps)


def run_cyclical_weight_transfer(cfg: ExperimentConfig, split: Split,
                                 freq: int) -> RunResult:
    """Round-robin over institutions, `freq` epochs per visit, with a global
    plateau schedule scaled by the institution count."""
    if freq < 1:
        raise ValueError("weight transfer frequency must be >= 1")
    insts, val, test = _normalized_cohorts(split)
    k = len(insts)
    model = _build_model(cfg)
    rng = _train_rng(cfg)
    policy = replace(cfg.plateau, patience_scale=k)
    state = PlateauState.fresh(cfg.optimizer.learning_rate)
    channel = transport.make_channel(cfg.transport)
    rec = _Recorder(cfg, val, test)
    steps = transfers = 0
    global_epoch = 0
    stopped = False
    try:
        visit = 0
        while not stopped and global_epoch < cfg.max_epochs:
            i = visit % k
            for _ in range(freq):
                global_epoch += 1
                lr = _current_lr(cfg, state, global_epoch - 1)
                phase = state.phase
                steps += train_on(model, insts[i], 1, cfg, lr, rng)
                val_loss = rec.record(model, global_epoch, phase, i, lr, insts[i])
                if observe(state, policy, val_loss).kind == STOP:
                    stopped = True
                    break
                if global_epoch >= cfg.max_epochs:
                    break
            visit += 1
            if not stopped and global_epoch < cfg.max_epochs:
                model = _handoff(model, cfg, channel, origin=i,
                                 destination=(i + 1) % k, global_epoch=global_epoch)
                transfers += 1
    finally:
        channel.close()
    return rec.finish(model, transfers=transfers, steps=steps)


def run_scaling_sweep(cfg: ExperimentConfig, split: Split, m_values,
                      freq: int = 1) -> list:
    """Cyclical weight transfer over the first m institutions, per m."""
    m_values = list(m_values)
    if not m_values or max(m_values) > len(split.institutions):
        raise ValueError("m_values must be non-empty and within the split size")
    rows = []
    for m in m_values:
        sub = Split(institutions=split.institutions[:m],
                    validation=split.validation, test=split.test)
        res = run_cyclical_weight_transfer(cfg, sub, freq)
        rows.append((m, res.test_accuracy))
    return rows


def run_heuristic(cfg: ExperimentConfig, split: Split, kind: str, *,
                  institution: int = 0, frequency: int = 1) -> RunResult:
    if kind == "single":
        return run_single_institution(cfg, split, institution)
    if kind == "central":
        return run_central(cfg, split)
    if kind == "ensemble":
        return run_ensemble(cfg, split)
    if kind == "single_transfer":
        return run_single_weight_transfer(cfg, split)
    if kind == "cyclical":
        return run_cyclical_weight_transfer(cfg, split, frequency)
    raise ValueError(f"unknown heuristic {kind!r}")


def mlp_specs(in_dim: int, hidden, num_classes: int, *,
              batchnorm: bool = False, dropout: float = 0.0) -> list:
    """Default architecture: affine->(batchnorm)->relu blocks, optional
    dropout before the readout, sigmoid head for 2 classes else softmax."""
    specs = []
    width = in_dim
    for h in hidden:
        specs.append(LayerSpec("affine", width, h))
        if batchnorm:
            specs.append(LayerSpec("batchnorm", h, h))
        specs.append(LayerSpec("relu", h, h))
        width = h
    if dropout > 0.0:
        specs.append(LayerSpec("dropout", width, width, dropout_rate=dropout))
    if num_classes == 2:
        specs.append(LayerSpec("sigmoid-head", width, 1))
    else:
        specs.append(LayerSpec("softmax-head", width, num_classes))
    return specs
