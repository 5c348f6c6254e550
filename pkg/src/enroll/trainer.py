"""Joint SGD training with the dev-accuracy learning-rate schedule."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import numkernel as nk
from .datamodel import LABEL_INDEX, LABELS, Dataset, LabeledExample, Vocabularies, split_dataset
from .matcher import Matcher
from .metrics import MetricsReport, evaluate
from .model import EnrollModel, ModelConfig

log = logging.getLogger(__name__)

STOP = "STOP"


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.1
    batch_size: int = 64
    lr_divisor: float = 5.0
    # literal reading of the "10e-5" stopping threshold; 1e-5 is the alternative
    stop_lr: float = 1e-4
    dropout: float = 0.5
    aux_weight: float = 0.1
    l2: float = 1e-4
    # global gradient-norm cap; None disables clipping
    clip_norm: Optional[float] = 5.0
    max_epochs: int = 15
    seed: int = 0

    def __post_init__(self):
        if min(self.lr0, self.batch_size, self.stop_lr) <= 0 or self.max_epochs < 0:
            raise ValueError("learning rate, batch size and threshold must be positive")
        if self.lr_divisor <= 1.0:
            raise ValueError("lr_divisor must exceed 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")
        if not 0.0 <= self.dropout < 1.0 or self.aux_weight < 0 or self.l2 < 0:
            raise ValueError("dropout in [0, 1), aux_weight and l2 non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    dev_accuracy: float
    lr: float


@dataclass
class TrainResult:
    params: nk.ParameterStore
    log: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_accuracy: float = 0.0

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "dev_accuracy", "lr"])
        for r in self.log:
            w.writerow([r.epoch, repr(r.loss), repr(r.dev_accuracy), repr(r.lr)])
        return buf.getvalue()


def example_loss(model: EnrollModel, data: Dataset, example: LabeledExample, params,
                 tape: nk.GradTape, rng=None, dropout: float = 0.0, aux_weight: float = 0.1):
    """Classification cross-entropy plus weighted auxiliary diagnosis/treatment losses."""
    out = model.forward(data.criteria(example), data.patients[example.patient_id], params,
                        tape, rng, dropout, with_aux=aux_weight > 0)
    loss = nk.softmax_cross_entropy(out.logits, LABEL_INDEX[example.label])
    if aux_weight > 0:
        dx_loss, tx_loss = out.aux_loss
        loss = nk.add(loss, nk.scale(nk.add(dx_loss, tx_loss), aux_weight))
    return loss


def compute_loss(model: EnrollModel, data: Dataset, batch: Sequence[LabeledExample], params,
                 rng: Optional[np.random.Generator] = None, dropout: float = 0.0,
                 aux_weight: float = 0.1) -> Tuple[float, nk.ParameterStore]:
    """Mean loss over ``batch`` and its gradient for every parameter."""
    if not batch:
        raise ValueError("empty batch")
    tape = nk.GradTape()
    total = None
    for ex in batch:
        loss = example_loss(model, data, ex, params, tape, rng, dropout, aux_weight)
        total = loss if total is None else nk.add(total, loss)
    mean = nk.scale(total, 1.0 / len(batch))
    tape.backward(mean)
    return float(mean.value), tape.gradients(params)


def lr_schedule(dev_history: Sequence[float], lr: float, divisor: float = 5.0,
                stop_lr: float = 1e-4):
    """Divide ``lr`` when the latest dev accuracy fell; STOP once below ``stop_lr``."""
    if not dev_history:
        raise ValueError("need at least one completed epoch")
    if len(dev_history) >= 2 and dev_history[-1] < dev_history[-2]:
        lr = lr / divisor
    return STOP if lr < stop_lr else lr


def predict(model: EnrollModel, data: Dataset, examples: Sequence[LabeledExample], params,
            use_nir: bool = True):
    matcher = Matcher(model, params, use_nir=use_nir)
    return [matcher.match(data.criteria(e), data.patients[e.patient_id]) for e in examples]


def dev_accuracy(model, data, examples, params) -> float:
    if not examples:
        return 0.0
    results = predict(model, data, examples, params, use_nir=False)
    return float(np.mean([r.neural_label == e.label for r, e in zip(results, examples)]))


def fit(model: EnrollModel, data: Dataset, train: Sequence[LabeledExample],
        dev: Sequence[LabeledExample], config: TrainConfig = TrainConfig(),
        params: Optional[nk.ParameterStore] = None, progress=None) -> TrainResult:
    """SGD over shuffled mini-batches; keeps the parameters with the best dev accuracy.

    Dev accuracy is measured on the neural label, the quantity the paper's
    schedule tracks; the quantity override plays no part in training.
    """
    if not train or not dev:
        raise ValueError("training and validation splits must be non-empty")
    rng = np.random.default_rng(config.seed)
    params = params if params is not None else model.init_params(config.seed)
    result = TrainResult({k: v.copy() for k, v in params.items()})
    if config.max_epochs == 0:
        return result
    lr = config.lr0
    history: List[float] = []
    best = -1.0
    order_rng = np.random.default_rng(config.seed + 1)
    for epoch in range(1, config.max_epochs + 1):
        order = order_rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[start:start + config.batch_size]]
            loss, grads = compute_loss(model, data, batch, params, rng, config.dropout, config.aux_weight)
            params = nk.sgd_step(params, grads, lr, config.l2, config.clip_norm)
            losses.append(loss * len(batch))
        acc = dev_accuracy(model, data, dev, params)
        history.append(acc)
        rec = EpochRecord(epoch, float(np.sum(losses) / len(train)), acc, lr)
        result.log.append(rec)
        log.info("epoch %d loss %.4f dev_acc %.4f lr %.3g", epoch, rec.loss, acc, lr)
        if progress is not None:
            progress(rec)
        if acc > best:
            best = acc
            result.params = {k: v.copy() for k, v in params.items()}
            result.best_epoch, result.best_dev_accuracy = epoch, acc
        nxt = lr_schedule(history, lr, config.lr_divisor, config.stop_lr)
        if nxt == STOP:
            break
        lr = nxt
    return result


def majority_label(examples: Sequence[LabeledExample]) -> str:
    """Most frequent training label; ties resolve in LABELS order."""
    counts = {l: 0 for l in LABELS}
    for e in examples:
        counts[e.label] += 1
    return max(LABELS, key=lambda l: counts[l])


def train_vocabularies(data: Dataset, train: Sequence[LabeledExample]) -> Vocabularies:
    """Vocabularies over all trials and the training-split patients only."""
    patients = sorted({e.patient_id for e in train})
    return Vocabularies.build(data.trials.values(), [data.patients[p] for p in patients])


@dataclass
class Experiment:
    model: EnrollModel
    result: TrainResult
    test: List[LabeledExample]
    with_nir: MetricsReport
    without_nir: MetricsReport
    majority_f1: float


def run_experiment(data: Dataset, seed: int = 0, model_config: ModelConfig = ModelConfig(),
                   train_config: Optional[TrainConfig] = None, progress=None) -> Experiment:
    """Split by patient with ``seed``, fit, and score the test split with and without NIR."""
    tconf = train_config or TrainConfig(seed=seed)
    train, dev, test = split_dataset(data.examples, seed)
    model = EnrollModel(train_vocabularies(data, train), model_config)
    result = fit(model, data, train, dev, tconf, progress=progress)
    gold = [e.label for e in test]
    groups = [e.trial_id for e in test]
    matches = predict(model, data, test, result.params, use_nir=True)
    probs = np.stack([r.neural_probs for r in matches])
    with_nir = evaluate([r.final_label for r in matches], gold, probs, groups)
    without_nir = evaluate([r.neural_label for r in matches], gold, probs, groups)
    majority = evaluate([majority_label(train)] * len(gold), gold).micro_f1
    return Experiment(model, result, test, with_nir, without_nir, majority)
