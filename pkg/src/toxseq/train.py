"""Losses, backpropagation through time, a finite-difference oracle, Adam, training."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .model import (
    CLASSIFICATION,
    DIRECTIONS,
    PARAM_ORDER,
    REGRESSION,
    BilstmModel,
    DirectionTrace,
    Hyperparams,
    forward_batch,
    stacked_gates,
    init_model,
)
from .tensor import Rng, tanh_v

log = logging.getLogger(__name__)

PROB_CLIP = 1e-12


class EmptyBatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class ShapeMismatch(ValueError):
    pass


class RateOutOfRange(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


def bce_loss(p, y):
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def mse_loss(pred, y):
    d = np.asarray(pred, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    with np.errstate(over="ignore"):  # overflow becomes inf and is caught as divergence
        return d * d


def _collate(batch, n_tasks: int):
    if len(batch) == 0:
        raise EmptyBatch("batch is empty")
    seqs = [b[0] for b in batch]
    labels = np.array([np.asarray(b[1], dtype=np.float64) for b in batch]).reshape(len(batch), n_tasks)
    mask = np.array([np.asarray(b[2], dtype=bool) for b in batch]).reshape(len(batch), n_tasks)
    # masked labels may hold NaN sentinels; never let them reach arithmetic
    labels = np.where(mask, labels, 0.0)
    return seqs, labels, mask


def _masked_mean_loss(kind: str, out, labels, mask):
    n = int(mask.sum())
    if n == 0:
        raise EmptyBatch("batch has no unmasked labels")
    per = bce_loss(out, labels) if kind == CLASSIFICATION else mse_loss(out, labels)
    return float(np.where(mask, per, 0.0).sum() / n), n


def batch_loss(model: BilstmModel, batch, dropout_mask=None) -> float:
    seqs, labels, mask = _collate(batch, model.n_tasks)
    out, _ = forward_batch(model, seqs, dropout_mask)
    return _masked_mean_loss(model.task_kind, out, labels, mask)[0]


def _scan_backward(cell, tr: DirectionTrace, dh, d_emb, grads: dict, prefix: str):
    """Reverse pass over one direction; accumulates into ``grads`` and ``d_emb``."""
    U = dh.shape[1]
    W, _ = stacked_gates(cell)
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[0])
    dc = np.zeros_like(dh)
    for t in range(len(tr.gates) - 1, -1, -1):
        a = tr.active[t][:, None]
        f, i, o, g = tr.gates[t]
        tc = tanh_v(tr.c_new[t])
        dh_new = np.where(a, dh, 0.0)
        dc_new = np.where(a, dc, 0.0) + dh_new * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc_new * tr.prev[t].c * f * (1.0 - f),
                dc_new * g * i * (1.0 - i),
                dh_new * tc * o * (1.0 - o),
                dc_new * i * (1.0 - g * g),
            ],
            axis=1,
        )
        hx = tr.inputs[t]
        dW += dz.T @ hx
        db += dz.sum(axis=0)
        dhx = dz @ W
        dh = np.where(a, dhx[:, :U], dh)
        dc = np.where(a, dc_new * f, dc)
        act = tr.active[t]
        np.add.at(d_emb, tr.tokens[t][act], dhx[act, U:])
    for k, gate in enumerate("fioc"):
        grads[f"{prefix}.W_{gate}"] += dW[k * U : (k + 1) * U]
        grads[f"{prefix}.b_{gate}"] += db[k * U : (k + 1) * U]


def backward(model: BilstmModel, batch, dropout_mask=None):
    """Mean masked loss over the batch and its exact gradient for every parameter."""
    seqs, labels, mask = _collate(batch, model.n_tasks)
    out, tr = forward_batch(model, seqs, dropout_mask)
    loss, n = _masked_mean_loss(model.task_kind, out, labels, mask)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")

    if model.task_kind == CLASSIFICATION:
        # d/dlogit of BCE is p - y, except where the probability clip is active
        inside = (out > PROB_CLIP) & (out < 1.0 - PROB_CLIP)
        dlogits = np.where(mask & inside, out - labels, 0.0) / n
    else:
        dlogits = np.where(mask, 2.0 * (out - labels), 0.0) / n

    grads = {name: np.zeros_like(model.params[name]) for name in PARAM_ORDER}
    grads["head_W"] = dlogits.T @ tr.head_in
    grads["head_b"] = dlogits.sum(axis=0)
    drep = dlogits @ model.head_W
    if tr.dropout_mask is not None:
        drep = drep * tr.dropout_mask
    U = model.units
    for d, dh, dtr in (("fwd", drep[:, :U], tr.fwd), ("bwd", drep[:, U:], tr.bwd)):
        _scan_backward(model.cell(d), dtr, dh.copy(), grads["embedding"], grads, d)
    return loss, grads


def finite_diff_grad(model: BilstmModel, batch, eps: float = 1e-4, dropout_mask=None):
    """Central differences, one parameter entry at a time, same data and mask."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    params = {k: v.copy() for k, v in model.params.items()}
    probe = model.with_params(params)
    grads = {}
    for name in PARAM_ORDER:
        arr = params[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = batch_loss(probe, batch, dropout_mask)
            flat[j] = orig - eps
            down = batch_loss(probe, batch, dropout_mask)
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * eps)
        grads[name] = g
    return grads


def relative_errors(analytic: dict, numeric: dict, floor: float = 1e-8) -> dict:
    """Per block: max |a - n| / max(|n|, floor)."""
    out = {}
    for name in PARAM_ORDER:
        a, n = analytic[name], numeric[name]
        out[name] = float(np.max(np.abs(a - n) / np.maximum(np.abs(n), floor))) if a.size else 0.0
    return out


def global_norm(grads: dict) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass(frozen=True)
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, params: dict, beta1=0.9, beta2=0.999, epsilon=1e-8) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(model: BilstmModel, grads: dict, state: AdamState, lr: float):
    """One Adam update; returns a new model and a new state, inputs untouched."""
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    t = state.t + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in model.params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {theta.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_params[name] = theta - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[name], new_v[name] = m, v
    new_state = dataclasses.replace(state, m=new_m, v=new_v, t=t)
    return model.with_params(new_params), new_state


def make_dropout_mask(rng: Rng, width, rate: float) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate).

    ``width`` may be an int or a shape tuple (e.g. (batch, 2*units)).
    """
    if not 0.0 <= rate < 1.0:
        raise RateOutOfRange(f"dropout rate must be in [0, 1), got {rate}")
    shape = (width,) if isinstance(width, (int, np.integer)) else tuple(width)
    n = int(np.prod(shape))
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.uniform(n) >= rate
    return np.where(keep, 1.0 / (1.0 - rate), 0.0).reshape(shape)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    valid_metric: float


@dataclass
class TrainHistory:
    metric: str
    records: list = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "valid_metric"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.valid_metric)])
        return buf.getvalue()


def encode_records(vocab, records, max_len: int):
    """(EncodedSequence, labels, mask) triples for the loss functions."""
    return [(codec.encode(vocab, r.smiles, max_len), r.labels, r.mask) for r in records]


def _is_better(kind, metric, loss, best_metric, best_loss) -> bool:
    if best_metric is None:
        return True
    if kind == CLASSIFICATION:
        return metric > best_metric or (metric == best_metric and loss < best_loss)
    return metric < best_metric or (metric == best_metric and loss < best_loss)


def train(config: Hyperparams, train_set, valid_set, schema, vocab=None, on_epoch=None):
    """Seeded mini-batch Adam training; returns the best-validation snapshot.

    ``train_set``/``valid_set`` are lists of DatasetRecord. The vocabulary is
    built from ``train_set`` unless one is given.
    """
    from .metrics import evaluate

    if not train_set or not valid_set:
        raise EmptyDataset("training and validation sets must be non-empty")
    kind = schema.kind
    if vocab is None:
        vocab = codec.build_vocab([r.smiles for r in train_set])
    max_len = config.max_len or codec.default_max_len([r.smiles for r in train_set])

    root = Rng(config.seed)
    init_rng, shuffle_rng, dropout_rng = root.spawn(), root.spawn(), root.spawn()
    model = init_model(vocab, schema.task_names, kind, config, max_len, init_rng)
    if kind == REGRESSION:
        # start the output at the training mean; the recurrent part learns residuals
        ys = np.array([r.labels[0] for r in train_set])
        model.params["head_b"][:] = float(ys.mean())

    examples = encode_records(vocab, train_set, max_len)
    n_trunc = sum(e[0].truncated for e in examples)
    if n_trunc:
        log.warning("%d training SMILES truncated to max_len=%d", n_trunc, max_len)
    adam = AdamState.zeros(model.params, config.beta1, config.beta2, config.adam_eps)
    history = TrainHistory(metric="roc_auc" if kind == CLASSIFICATION else "rmse")

    valid_examples = encode_records(vocab, valid_set, max_len)
    best = None
    best_metric = best_loss = None
    stale = 0
    width = 2 * config.units
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(examples))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [examples[k] for k in order[start : start + config.batch_size]]
            n_lab = int(sum(np.sum(b[2]) for b in batch))
            if n_lab == 0:
                continue
            dmask = None
            if config.dropout_rate > 0:
                dmask = make_dropout_mask(dropout_rng, (len(batch), width), config.dropout_rate)
            loss, grads = backward(model, batch, dmask)
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteLoss(f"non-finite gradient at epoch {epoch}, batch starting {start}")
            grads = clip_by_global_norm(grads, config.clip_norm)
            model, adam = adam_step(model, grads, adam, config.learning_rate)
            total += loss * n_lab
            count += n_lab
        train_loss = total / count if count else float("nan")
        if not math.isfinite(train_loss):
            raise NonFiniteLoss(f"training loss diverged at epoch {epoch} (lr={config.learning_rate})")

        report = evaluate(model, valid_set, schema)
        valid_loss = _dataset_loss(model, valid_examples)
        history.records.append(EpochRecord(epoch, train_loss, report.mean))
        if on_epoch is not None:
            on_epoch(history.records[-1])
        if _is_better(kind, report.mean, valid_loss, best_metric, best_loss):
            best, best_metric, best_loss = model, report.mean, valid_loss
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break
    return (best if best is not None else model), history


def _dataset_loss(model: BilstmModel, examples, batch_size: int = 64) -> float:
    total, count = 0.0, 0
    for start in range(0, len(examples), batch_size):
        batch = examples[start : start + batch_size]
        n = int(sum(np.sum(b[2]) for b in batch))
        if n:
            total += batch_loss(model, batch) * n
            count += n
    return total / count if count else float("nan")


def dataset_loss(model: BilstmModel, records) -> float:
    """Mean masked loss (no dropout) over DatasetRecords."""
    return _dataset_loss(model, encode_records(model.vocab, records, model.max_len))
