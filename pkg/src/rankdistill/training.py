"""Loss functions, AdamW, learning-rate schedules and the training loop.

Three objectives are supported:

* ``bce``     -- binary relevance labels, logistic loss per pair;
* ``mse``     -- regression onto teacher scores per pair;
* ``ranknet`` -- pairwise logistic loss over a teacher-ordered list.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, TrainingDivergedError
from .reranker import NUM_FEATURES, FeatureProvider, ScorerParams, backward, forward

logger = logging.getLogger(__name__)

LOSS_KINDS = ("bce", "mse", "ranknet")


# -- samples ---------------------------------------------------------------


@dataclass(frozen=True)
class BinaryPairSample:
    query_id: str
    doc_id: str
    label: int
    rank: int | None = None

    kind = "bce"

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class RegressionPairSample:
    query_id: str
    doc_id: str
    teacher_score: float
    rank: int | None = None

    kind = "mse"

    def __post_init__(self):
        if not math.isfinite(self.teacher_score):
            raise DataError(f"teacher score must be finite, got {self.teacher_score!r}")


@dataclass(frozen=True)
class PermutationSample:
    query_id: str
    ordered_doc_ids: tuple[str, ...]
    ranks: tuple[int, ...] | None = None

    kind = "ranknet"

    def __post_init__(self):
        object.__setattr__(self, "ordered_doc_ids", tuple(self.ordered_doc_ids))
        if self.ranks is not None:
            object.__setattr__(self, "ranks", tuple(self.ranks))
            if len(self.ranks) != len(self.ordered_doc_ids):
                raise DataError("ranks must align with ordered_doc_ids")
        if len(self.ordered_doc_ids) < 2:
            raise DataError(f"permutation for {self.query_id!r} needs at least 2 documents")
        if len(set(self.ordered_doc_ids)) != len(self.ordered_doc_ids):
            raise DataError(f"permutation for {self.query_id!r} repeats a document")


Sample = BinaryPairSample | RegressionPairSample | PermutationSample


def sample_to_json(sample: Sample) -> dict:
    rec: dict = {"kind": sample.kind, "query_id": sample.query_id}
    if isinstance(sample, PermutationSample):
        rec["doc_ids"] = list(sample.ordered_doc_ids)
        if sample.ranks is not None:
            rec["ranks"] = list(sample.ranks)
    else:
        rec["doc_id"] = sample.doc_id
        if isinstance(sample, BinaryPairSample):
            rec["label"] = sample.label
        else:
            rec["teacher_score"] = sample.teacher_score
        if sample.rank is not None:
            rec["rank"] = sample.rank
    return rec


def sample_from_json(rec: dict) -> Sample:
    kind = rec.get("kind")
    try:
        if kind == "bce":
            return BinaryPairSample(rec["query_id"], rec["doc_id"], int(rec["label"]), rec.get("rank"))
        if kind == "mse":
            return RegressionPairSample(rec["query_id"], rec["doc_id"], float(rec["teacher_score"]), rec.get("rank"))
        if kind == "ranknet":
            ranks = rec.get("ranks")
            return PermutationSample(rec["query_id"], tuple(rec["doc_ids"]), tuple(ranks) if ranks else None)
    except KeyError as exc:
        raise DataError(f"{kind} sample is missing field {exc.args[0]!r}") from None
    raise DataError(f"unknown sample kind {kind!r}")


def write_samples(samples: Iterable[Sample], path) -> int:
    n = 0
    with Path(path).open("w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(sample_to_json(s), sort_keys=True) + "\n")
            n += 1
    return n


def read_samples(path) -> list[Sample]:
    out = []
    with Path(path).open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path, lineno) from None
            try:
                out.append(sample_from_json(rec))
            except DataError as exc:
                raise ParseError(str(exc), path, lineno) from None
    return out


# -- losses ----------------------------------------------------------------


def _softplus(x):
    """ln(1 + e^x) without overflow."""
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_loss_grad(score, label):
    """Logistic loss on a logit. Returns ``(loss, dloss/dscore)``; vectorizes over arrays."""
    s = np.asarray(score, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    loss = y * _softplus(-s) + (1.0 - y) * _softplus(s)
    grad = _sigmoid(s) - y
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def mse_loss_grad(score, teacher_score):
    diff = np.asarray(score, dtype=np.float64) - np.asarray(teacher_score, dtype=np.float64)
    loss, grad = diff * diff, 2.0 * diff
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def ranknet_loss_grad(scores: Sequence[float]):
    """RankNet loss for scores listed in target order (earlier = more relevant).

    loss = sum_{i<j} ln(1 + exp(s_j - s_i)); every ordered pair has target probability 1.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] < 2:
        raise ValueError("ranknet loss needs at least two scores")
    diff = s[None, :] - s[:, None]  # diff[i, j] = s_j - s_i
    upper = np.triu(np.ones_like(diff, dtype=bool), k=1)
    loss = float(_softplus(diff[upper]).sum())
    w = np.where(upper, _sigmoid(diff), 0.0)  # d/d s_j of pair (i, j) is +w_ij, d/d s_i is -w_ij
    grad = w.sum(axis=0) - w.sum(axis=1)
    return loss, grad


# -- optimization ----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    peak_lr: float = 1e-5
    schedule: str = "linear_decay"
    seed: int = 0
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be > 0")
        if self.schedule not in ("linear_decay", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.optimizer != "adamw":
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# Transformer fine-tuning recipes. The MLP student needs far larger rates at desk scale.
BCE_RECIPE = TrainConfig(epochs=10, batch_size=32, peak_lr=1e-5, schedule="linear_decay")
MSE_RECIPE = TrainConfig(epochs=10, batch_size=32, peak_lr=1e-5, schedule="linear_decay")
RANKNET_RECIPE = TrainConfig(epochs=2, batch_size=32, peak_lr=5e-5, schedule="constant")
RANKNET_DISTILL_RECIPE = TrainConfig(epochs=2, batch_size=32, peak_lr=2e-5, schedule="linear_decay")


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if config.schedule == "constant":
        return config.peak_lr
    return config.peak_lr * (1.0 - step / total_steps)


class AdamW:
    """Adam with decoupled weight decay on a flat parameter vector."""

    def __init__(self, size: int, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        theta = theta - lr * self.weight_decay * theta
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class LogRow:
    epoch: int
    step: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    params: ScorerParams
    epoch_losses: list[float]
    log: list[LogRow] = field(default_factory=list)


def write_loss_log(rows: Iterable[LogRow], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "step", "lr", "loss"])
        for r in rows:
            w.writerow([r.epoch, r.step, repr(r.lr), repr(r.loss)])


class TrainingSet:
    """Samples of a single kind with their feature matrices computed once."""

    def __init__(self, samples: Sequence[Sample], provider: FeatureProvider):
        kinds = {s.kind for s in samples}
        if len(kinds) != 1:
            raise DataError(f"training samples mix kinds {sorted(kinds)}")
        self.kind = kinds.pop()
        self.samples = samples
        if self.kind == "ranknet":
            self.features = []
            for s in samples:
                self.features.append(provider.features(s.query_id, s.ordered_doc_ids, ranks=s.ranks))
        else:
            grouped: dict[str, list[int]] = {}
            for i, s in enumerate(samples):
                grouped.setdefault(s.query_id, []).append(i)
            x = np.zeros((len(samples), NUM_FEATURES))
            for qid, idx in grouped.items():
                ranks = [samples[i].rank or 0 for i in idx]
                x[idx] = provider.features(qid, [samples[i].doc_id for i in idx], ranks=ranks)
            self.features = x
            if self.kind == "bce":
                self.targets = np.array([s.label for s in samples], dtype=np.float64)
            else:
                self.targets = np.array([s.teacher_score for s in samples], dtype=np.float64)

    def __len__(self):
        return len(self.samples)

    def feature_matrix(self) -> np.ndarray:
        if self.kind == "ranknet":
            return np.concatenate(self.features)
        return self.features

    def loss_and_grad(self, params: ScorerParams, idx: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean loss over the batch and its flat parameter gradient."""
        n = len(idx)
        if self.kind == "ranknet":
            x = np.concatenate([self.features[i] for i in idx])
            scores = forward(params, x)
            upstream = np.empty_like(scores)
            total = 0.0
            offset = 0
            for i in idx:
                m = self.features[i].shape[0]
                loss, g = ranknet_loss_grad(scores[offset : offset + m])
                total += loss
                upstream[offset : offset + m] = g
                offset += m
            return total / n, backward(params, x, upstream / n)
        x = self.features[idx]
        scores = forward(params, x)
        fn = bce_loss_grad if self.kind == "bce" else mse_loss_grad
        loss, g = fn(scores, self.targets[idx])
        return float(np.sum(loss)) / n, backward(params, x, g / n)


def train(
    params: ScorerParams,
    samples: Sequence[Sample] | TrainingSet,
    config: TrainConfig,
    provider: FeatureProvider | None = None,
    expected_kind: str | None = None,
) -> TrainResult:
    """Minibatch AdamW over shuffled samples; deterministic for a fixed seed.

    Raises ``TrainingDivergedError`` as soon as a batch loss is non-finite.
    """
    if isinstance(samples, TrainingSet):
        data = samples
        samples = data.samples
    else:
        samples = list(samples)
        data = None
    if not samples:
        raise DataError("training set is empty")
    if expected_kind is not None:
        bad = {s.kind for s in samples} - {expected_kind}
        if bad:
            raise DataError(f"loss {expected_kind!r} cannot train on {sorted(bad)} samples")
    if data is None:
        if provider is None:
            raise ValueError("a feature provider is required to featurize raw samples")
        data = TrainingSet(samples, provider)
    rng = np.random.default_rng(config.seed)
    theta = params.flat()
    opt = AdamW(theta.size, config.betas, config.eps, config.weight_decay)
    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    total = config.epochs * steps_per_epoch
    step = 0
    epoch_losses = []
    log = []
    current = params.copy()
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        running = 0.0
        for start in range(0, len(samples), config.batch_size):
            idx = order[start : start + config.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):  # caught just below
                loss, grad = data.loss_and_grad(current, idx)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                ids = [samples[i].query_id for i in idx]
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} (epoch {epoch}), batch queries {ids[:5]}",
                    step=step,
                    batch_ids=ids,
                )
            lr = lr_at(config, step, total)
            theta = opt.step(theta, grad, lr)
            current = current.with_flat(theta)
            log.append(LogRow(epoch, step, lr, loss))
            running += loss * len(idx)
            step += 1
        epoch_losses.append(running / len(samples))
        logger.info("epoch %d: mean loss %.6f", epoch, epoch_losses[-1])
    return TrainResult(current, epoch_losses, log)


def fit_feature_normalizer(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column mean and standard deviation; constant columns get scale 1."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std > 1e-12, std, 1.0)
