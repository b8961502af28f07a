"""Training loops: dense SGD, lottery-ticket score learning, and the
two-stage sparse generator (penalized warm-up, then masked fine-tune).

All three modes share one optimizer (momentum SGD with L2 weight decay
folded into the gradient and a cosine-annealed learning rate) and one
per-epoch data order derived from the run seed, so ablations differ in
exactly the factor under study.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sparse_stgcn import autodiff as ad
from sparse_stgcn.autodiff import Tensor
from sparse_stgcn.checkpoint import save_checkpoint
from sparse_stgcn.data import Dataset, preprocess
from sparse_stgcn.masks import (
    MaskScores,
    MaskSet,
    apply_mask,
    binarize,
    random_mask,
    ste_weights,
)
from sparse_stgcn.network import ParamRegistry, STGCNNetwork, stack_batch
from sparse_stgcn.seeding import epoch_rng, stream_rng

__all__ = [
    "MODES",
    "InvariantError",
    "TrainConfig",
    "EpochRecord",
    "TrainLog",
    "SGD",
    "cosine_lr",
    "group_lasso",
    "dropped_weight_norm",
    "warmup_step",
    "finetune_step",
    "install_mask",
    "lth_step",
    "predict_proba",
    "evaluate",
    "train",
]

MODES = ("dense", "lth", "generator")

SCORE_INITS = ("magnitude", "uniform")


class InvariantError(RuntimeError):
    """A training invariant was violated (corrupted state, not bad input)."""


# ---------------------------------------------------------------------------
# configuration and logging


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    ``batch_size`` defaults to a desk-scale 32.  ``sparsity`` is the zero
    fraction used by lth and generator modes and is ignored by dense mode.
    ``lam`` weighs the warm-up shrinkage penalty; ``score_init`` selects
    how lottery-ticket scores start (weight magnitudes or seeded uniform).
    ``warmup_epochs`` defaults to a symmetric split, epochs // 2.
    """

    epochs: int = 100
    warmup_epochs: int | None = None
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    lam: float = 1.0
    sparsity: float = 0.0
    seed: int = 0
    mode: str = "dense"
    score_init: str = "magnitude"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.warmup_epochs is None:
            object.__setattr__(self, "warmup_epochs", self.epochs // 2)
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError(
                f"warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}"
            )
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.score_init not in SCORE_INITS:
            raise ValueError(
                f"score_init must be one of {SCORE_INITS}, got {self.score_init!r}"
            )


@dataclass(frozen=True)
class EpochRecord:
    """One logged epoch: losses, the dropped-weight norm, and accuracies."""

    epoch: int
    stage: str
    class_loss: float
    penalty: float
    wstar_norm: float
    train_acc: float
    test_acc: float
    seconds: float

    def line(self) -> str:
        values = (
            self.class_loss,
            self.penalty,
            self.wstar_norm,
            self.train_acc,
            self.test_acc,
            self.seconds,
        )
        return ",".join(
            [str(self.epoch), self.stage] + [format(float(v), ".17g") for v in values]
        )


@dataclass
class TrainLog:
    """Per-epoch records, serialized one comma-separated record per line.

    Column order: epoch, stage, class_loss, penalty, wstar_norm,
    train_acc, test_acc, seconds.  Every column except ``seconds`` is a
    pure function of (config, seed, data).
    """

    records: list[EpochRecord] = field(default_factory=list)

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]

    def save(self, path) -> None:
        text = "\n".join(self.lines())
        Path(path).write_text(text + "\n" if text else "")

    @property
    def final_test_acc(self) -> float:
        if not self.records:
            raise ValueError("empty training log")
        return self.records[-1].test_acc


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient.

    Per parameter: v <- momentum * v + (grad + weight_decay * w), then
    w <- w - lr * v.  Updates reassign the tensor's data array rather
    than mutating it, so forward graphs never alias optimizer writes.
    ``lr`` is assigned by the caller (typically once per epoch).
    """

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params: list[tuple[str, Tensor]] = [(name, t) for name, t in params]
        names = [name for name, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer")
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in self.params
        }
        self.lr = 0.0

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None

    def step(self) -> None:
        for name, t in self.params:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            g = g + self.weight_decay * t.data
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            t.data = t.data - self.lr * v


def cosine_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    """Cosine-annealed rate: lr0 at epoch 0, 0 at ``total_epochs``."""
    if total_epochs < 1:
        raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


# ---------------------------------------------------------------------------
# losses over the dropped set


def group_lasso(registry: ParamRegistry, mask: MaskSet) -> Tensor:
    """Sum of per-group L2 norms of the entries the mask drops.

    One group per maskable registry entry; kept entries contribute
    nothing (and receive no gradient from this term).
    """
    keep = mask.keep_by_name()
    total = None
    for e in registry.maskable():
        dropped = ad.select(e.tensor, ~keep[e.name])
        norm = ad.l2_norm(dropped)
        total = norm if total is None else ad.add(total, norm)
    return total if total is not None else Tensor(0.0)


def dropped_weight_norm(registry: ParamRegistry, mask: MaskSet) -> float:
    """Flat L2 norm of all dropped entries together (logging only)."""
    keep = mask.keep_by_name()
    total = 0.0
    for e in registry.maskable():
        dropped = e.tensor.data[~keep[e.name]]
        total += float(np.dot(dropped, dropped))
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# single optimization steps


def warmup_step(net, mask, x, labels, config, opt):
    """One step on the full dense parameters.

    Loss is cross-entropy plus lam * group_lasso over the entries
    ``mask`` will drop.  With ``mask`` None or lam == 0 the penalty term
    is skipped entirely, which makes the update bit-identical to plain
    dense training.  Returns (logits array, class loss, penalty value).
    """
    logits = net.forward(x, mode="train")
    ce = ad.softmax_cross_entropy(logits, labels)
    loss = ce
    penalty_value = 0.0
    if mask is not None and config.lam != 0.0:
        penalty = group_lasso(net.registry(), mask)
        penalty_value = float(penalty.data)
        loss = ad.add(ce, ad.scale(penalty, config.lam))
    opt.zero_grad()
    ad.backward(loss)
    opt.step()
    return logits.data, float(ce.data), penalty_value


def install_mask(net: STGCNNetwork, mask: MaskSet, opt: SGD) -> None:
    """Transition to fine-tuning: hard-zero the dropped entries, zero
    their momentum, and install the mask on the network's forward.

    Zeroing most weights shifts every layer's activation scale at once,
    which an exponential running average would take many epochs to
    follow, so the batch-norm buffers are re-bootstrapped from the first
    post-transition batch."""
    keep = mask.keep_by_name()
    for e in net.registry().maskable():
        e.tensor.data = np.where(keep[e.name], e.tensor.data, 0.0)
        if e.name in opt.velocity:
            opt.velocity[e.name] = np.where(keep[e.name], opt.velocity[e.name], 0.0)
    apply_mask(net, mask)
    net.refresh_running_stats()


def finetune_step(net, x, labels, config, opt):
    """One step on the kept sub-network (mask already installed).

    Dropped entries must be exactly zero on entry and remain so: this
    holds because the masked forward routes them no gradient, weight
    decay scales their zero value, and their momentum was cleared at the
    transition.  Returns (logits array, class loss).
    """
    keep_by_name = net.mask
    if keep_by_name is None:
        raise ValueError("fine-tune step requires an installed mask")
    for e in net.registry().maskable():
        dropped = e.tensor.data[~keep_by_name[e.name]]
        if np.any(dropped != 0.0):
            raise InvariantError(
                f"dropped entries of {e.name} are nonzero at fine-tune step start"
            )
    logits = net.forward(x, mode="train")
    ce = ad.softmax_cross_entropy(logits, labels)
    opt.zero_grad()
    ad.backward(ce)
    opt.step()
    return logits.data, float(ce.data)


def lth_step(net, scores, x, labels, config, opt):
    """One score-learning step over frozen weights.

    The mask is re-binarized from the current scores and the forward
    uses mask * W0.  Weights, gamma, and beta are all frozen; the
    straight-through backward drives the score update.  The forward
    runs in train mode: normalizing by batch statistics is what keeps
    activations well-scaled through the stack when the weights
    themselves can never adapt, and the running buffers it accumulates
    are what make eval-mode scoring of the frozen subnet meaningful.
    Returns (logits array, class loss, mask used).
    """
    effective, mask = ste_weights(net.registry(), scores, config.sparsity)
    logits = net.forward(x, mode="train", overrides=effective)
    ce = ad.softmax_cross_entropy(logits, labels)
    opt.zero_grad()
    ad.backward(ce)
    opt.step()
    return logits.data, float(ce.data), mask


# ---------------------------------------------------------------------------
# evaluation


def predict_proba(net, dataset: Dataset, *, window: int = 64, batch_size: int = 256):
    """Softmax class probabilities for every sequence, in dataset order.

    Eval-mode forward with centered crops; no gradients, no state
    updates, deterministic.
    """
    if not dataset.sequences:
        raise ValueError("cannot evaluate an empty dataset")
    chunks = []
    with ad.no_grad():
        for start in range(0, len(dataset.sequences), batch_size):
            part = dataset.sequences[start : start + batch_size]
            x, _ = stack_batch([preprocess(s, window, False) for s in part])
            logits = net.forward(x, mode="eval").data
            shifted = logits - logits.max(axis=1, keepdims=True)
            expo = np.exp(shifted)
            chunks.append(expo / expo.sum(axis=1, keepdims=True))
    return np.concatenate(chunks, axis=0)


def evaluate(net, mask, dataset: Dataset, *, window: int = 64, batch_size: int = 256):
    """Top-1 accuracy and per-sample max probability.

    ``mask`` (a MaskSet, or None for an unmasked pass) is applied for
    the duration of the call; the network's prior mask is restored.
    """
    prior = net.mask
    apply_mask(net, mask)
    try:
        probs = predict_proba(net, dataset, window=window, batch_size=batch_size)
    finally:
        net.set_mask(prior)
    labels = np.array([s.label for s in dataset.sequences])
    accuracy = float(np.mean(probs.argmax(axis=1) == labels))
    return accuracy, probs.max(axis=1)


# ---------------------------------------------------------------------------
# full runs


def _check_datasets(net, train_set, test_set):
    for ds, name in ((train_set, "train"), (test_set, "test")):
        if not ds.sequences:
            raise ValueError(f"{name} dataset is empty")
        if ds.num_classes != net.config.num_classes:
            raise ValueError(
                f"{name} dataset has {ds.num_classes} classes, "
                f"network expects {net.config.num_classes}"
            )


def _epoch_batches(train_set, config, epoch, window):
    """Yield (x, labels) batches in the seeded per-epoch order."""
    rng = epoch_rng(config.seed, "order", epoch)
    order = rng.permutation(len(train_set.sequences))
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        seqs = [preprocess(train_set.sequences[i], window, True, rng) for i in idx]
        yield stack_batch(seqs)


def _dense_or_generator(train_set, test_set, net, config, window, out):
    registry = net.registry()
    mask = None
    if config.mode == "generator":
        mask = random_mask(registry, config.sparsity, config.seed)
    opt = SGD(
        ((e.name, e.tensor) for e in registry),
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    log = TrainLog()
    installed = False
    for epoch in range(config.epochs):
        if mask is not None and not installed and epoch == config.warmup_epochs:
            if out is not None:
                save_checkpoint(out / "warmup.stgw", net, mask=mask)
            install_mask(net, mask, opt)
            installed = True
        opt.lr = cosine_lr(config.lr0, epoch, config.epochs)
        started = time.perf_counter()
        correct = seen = steps = 0
        ce_sum = penalty_sum = 0.0
        for x, labels in _epoch_batches(train_set, config, epoch, window):
            if installed:
                logits, ce = finetune_step(net, x, labels, config, opt)
                penalty = 0.0
            else:
                logits, ce, penalty = warmup_step(net, mask, x, labels, config, opt)
            correct += int((logits.argmax(axis=1) == labels).sum())
            seen += len(labels)
            ce_sum += ce * len(labels)
            penalty_sum += penalty
            steps += 1
        wstar = dropped_weight_norm(registry, mask) if mask is not None else 0.0
        test_acc, _ = evaluate(net, mask if installed else None, test_set, window=window)
        stage = "dense" if mask is None else ("finetune" if installed else "warmup")
        log.records.append(
            EpochRecord(
                epoch=epoch,
                stage=stage,
                class_loss=ce_sum / seen,
                penalty=penalty_sum / steps,
                wstar_norm=wstar,
                train_acc=correct / seen,
                test_acc=test_acc,
                seconds=time.perf_counter() - started,
            )
        )
    return mask, log


def _lth(train_set, test_set, net, config, window):
    registry = net.registry()
    for e in registry:
        e.tensor.requires_grad = False
    if config.score_init == "uniform":
        scores = MaskScores.from_registry(
            registry, "uniform", stream_rng(config.seed, "mask")
        )
    else:
        scores = MaskScores.from_registry(registry, "magnitude")
    opt = SGD(
        scores.entries, momentum=config.momentum, weight_decay=config.weight_decay
    )
    log = TrainLog()
    mask = binarize(scores, config.sparsity)
    for epoch in range(config.epochs):
        opt.lr = cosine_lr(config.lr0, epoch, config.epochs)
        started = time.perf_counter()
        correct = seen = 0
        ce_sum = 0.0
        for x, labels in _epoch_batches(train_set, config, epoch, window):
            logits, ce, mask = lth_step(net, scores, x, labels, config, opt)
            correct += int((logits.argmax(axis=1) == labels).sum())
            seen += len(labels)
            ce_sum += ce * len(labels)
        mask = binarize(scores, config.sparsity)
        test_acc, _ = evaluate(net, mask, test_set, window=window)
        log.records.append(
            EpochRecord(
                epoch=epoch,
                stage="lth",
                class_loss=ce_sum / seen,
                penalty=0.0,
                wstar_norm=0.0,
                train_acc=correct / seen,
                test_acc=test_acc,
                seconds=time.perf_counter() - started,
            )
        )
    return mask, log


def train(train_set, test_set, net, config: TrainConfig, *, window: int = 64, out_dir=None):
    """Run one full training per ``config.mode``.

    dense: momentum SGD on all parameters, no mask.
    generator: draws one fixed random mask from the run seed, warm-up
        with the shrinkage penalty for ``warmup_epochs``, then hard-zeros
        the dropped entries and fine-tunes the kept sub-network; the
        cosine schedule continues across the boundary.  A checkpoint of
        the pre-zeroing warm-up state is written at the transition.
    lth: freezes all parameters at initialization and learns mask scores.

    Returns (net, mask or None, TrainLog).  With ``out_dir`` set, writes
    final.stgw (mask section included when one exists), train_log.csv,
    and warmup.stgw at a generator transition.
    """
    _check_datasets(net, train_set, test_set)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    if config.mode == "lth":
        mask, log = _lth(train_set, test_set, net, config, window)
    else:
        mask, log = _dense_or_generator(train_set, test_set, net, config, window, out)
    if out is not None:
        save_checkpoint(out / "final.stgw", net, mask=mask)
        log.save(out / "train_log.csv")
    return net, mask, log
