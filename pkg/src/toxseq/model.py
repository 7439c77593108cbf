"""Embedding -> bidirectional LSTM -> dense head, plus the model file format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import codec
from .codec import EncodedSequence, Vocabulary
from .tensor import DimensionMismatch, Rng, affine, concat, glorot_scale, init_uniform, sigmoid, tanh_v

CLASSIFICATION = "classification"
REGRESSION = "regression"

GATE_KEYS = ("W_f", "W_i", "W_o", "W_c", "b_f", "b_i", "b_o", "b_c")
DIRECTIONS = ("fwd", "bwd")
PARAM_ORDER = (
    ("embedding",)
    + tuple(f"{d}.{k}" for d in DIRECTIONS for k in GATE_KEYS)
    + ("head_W", "head_b")
)

FORMAT_MAGIC = "TOXSEQ-MODEL"
FORMAT_VERSION = 1


class TokenOutOfRange(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


class FormatVersionMismatch(ModelFormatError):
    pass


class ChecksumMismatch(ModelFormatError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    units: int = 32
    embed_dim: int = 32
    dropout_rate: float = 0.3
    learning_rate: float = 0.1
    max_len: int | None = None
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    patience: int | None = 10
    clip_norm: float | None = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.units < 1 or self.embed_dim < 1:
            raise ValueError("units and embed_dim must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass(frozen=True)
class LstmParams:
    W_f: np.ndarray
    W_i: np.ndarray
    W_o: np.ndarray
    W_c: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray

    @property
    def units(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1] - self.W_f.shape[0]


class LstmState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


class GateActivations(NamedTuple):
    f: np.ndarray
    i: np.ndarray
    o: np.ndarray
    c_tilde: np.ndarray


@dataclass(frozen=True)
class BilstmModel:
    vocab: Vocabulary
    params: dict
    task_names: tuple
    task_kind: str
    config: Hyperparams
    max_len: int

    @property
    def n_tasks(self) -> int:
        return len(self.task_names)

    @property
    def units(self) -> int:
        return self.config.units

    @property
    def embedding(self) -> np.ndarray:
        return self.params["embedding"]

    @property
    def head_W(self) -> np.ndarray:
        return self.params["head_W"]

    @property
    def head_b(self) -> np.ndarray:
        return self.params["head_b"]

    def cell(self, direction: str) -> LstmParams:
        return LstmParams(**{k: self.params[f"{direction}.{k}"] for k in GATE_KEYS})

    @property
    def forward_cell(self) -> LstmParams:
        return self.cell("fwd")

    @property
    def backward_cell(self) -> LstmParams:
        return self.cell("bwd")

    def with_params(self, params: dict) -> "BilstmModel":
        return dataclasses.replace(self, params=params)


def init_model(
    vocab: Vocabulary,
    task_names,
    task_kind: str,
    config: Hyperparams,
    max_len: int,
    rng: Rng | None = None,
) -> BilstmModel:
    """Glorot-uniform weights, zero biases except the forget gate."""
    if task_kind not in (CLASSIFICATION, REGRESSION):
        raise ValueError(f"unknown task kind {task_kind!r}")
    rng = rng if rng is not None else Rng(config.seed)
    U, E, V, T = config.units, config.embed_dim, vocab.size, len(task_names)
    if T < 1:
        raise ValueError("at least one task is required")
    params = {"embedding": init_uniform(rng, V, E, glorot_scale(V, E))}
    for d in DIRECTIONS:
        for k in GATE_KEYS[:4]:
            params[f"{d}.{k}"] = init_uniform(rng, U, U + E, glorot_scale(U + E, U))
        for k in GATE_KEYS[4:]:
            params[f"{d}.{k}"] = np.zeros(U)
        params[f"{d}.b_f"] = np.full(U, float(config.forget_bias))
    params["head_W"] = init_uniform(rng, T, 2 * U, glorot_scale(2 * U, T))
    params["head_b"] = np.zeros(T)
    return BilstmModel(
        vocab=vocab,
        params=params,
        task_names=tuple(task_names),
        task_kind=task_kind,
        config=config,
        max_len=int(max_len),
    )


def embed(model: BilstmModel, seq: EncodedSequence) -> list:
    toks = np.asarray(seq.tokens[: seq.true_length])
    if toks.size and (toks.min() < 0 or toks.max() >= model.vocab.size):
        raise TokenOutOfRange(f"token outside [0, {model.vocab.size})")
    return [model.embedding[t] for t in toks]


def stacked_gates(p: LstmParams):
    """Gate weights stacked f, i, o, c along rows: (4U, U+E) and (4U,)."""
    return (
        np.concatenate([p.W_f, p.W_i, p.W_o, p.W_c], axis=0),
        np.concatenate([p.b_f, p.b_i, p.b_o, p.b_c]),
    )


def _cell(W, b, hx, c_prev, units: int):
    z = hx @ W.T + b
    gates = sigmoid(z[..., : 3 * units])
    f = gates[..., :units]
    i = gates[..., units : 2 * units]
    o = gates[..., 2 * units :]
    c_tilde = tanh_v(z[..., 3 * units :])
    c = f * c_prev + i * c_tilde
    h = o * tanh_v(c)
    return LstmState(h, c), GateActivations(f, i, o, c_tilde)


def lstm_cell_step(p: LstmParams, x_t: np.ndarray, prev: LstmState):
    """One LSTM step; works on single vectors or (batch, dim) arrays.

    f, i, o = sigmoid(W_* [h_prev, x] + b_*), c_tilde = tanh(W_c [h_prev, x] + b_c),
    c = f * c_prev + i * c_tilde, h = o * tanh(c).
    """
    if x_t.shape[-1] != p.input_dim or prev.h.shape[-1] != p.units:
        raise DimensionMismatch(
            f"cell expects input {p.input_dim} / units {p.units}, "
            f"got x {x_t.shape} h {prev.h.shape}"
        )
    W, b = stacked_gates(p)
    return _cell(W, b, concat(prev.h, x_t), prev.c, p.units)


def zero_state(units: int, batch: int | None = None) -> LstmState:
    shape = (units,) if batch is None else (batch, units)
    return LstmState(np.zeros(shape), np.zeros(shape))


def run_direction(p: LstmParams, inputs, reversed: bool = False):
    """Run the cell over ``inputs`` from a zero state; returns (final, trace)."""
    if len(inputs) == 0:
        raise EmptyInput("run_direction needs at least one input vector")
    state = zero_state(p.units)
    trace = []
    for x in (inputs[::-1] if reversed else inputs):
        state, gates = lstm_cell_step(p, np.asarray(x, dtype=np.float64), state)
        trace.append((state, gates))
    return state, trace


# -- batched forward ---------------------------------------------------------


@dataclass
class DirectionTrace:
    tokens: np.ndarray  # (T, B) token read at each step, pad where inactive
    active: np.ndarray  # (T, B) bool
    inputs: list = field(default_factory=list)  # per step (B, U+E) [h_prev, x]
    prev: list = field(default_factory=list)  # per step LstmState before the step
    gates: list = field(default_factory=list)
    c_new: list = field(default_factory=list)


@dataclass
class ForwardTrace:
    fwd: DirectionTrace
    bwd: DirectionTrace
    rep: np.ndarray  # (B, 2U) before dropout
    dropout_mask: np.ndarray | None
    head_in: np.ndarray
    logits: np.ndarray
    output: np.ndarray


def stack_tokens(seqs, vocab_size: int | None = None):
    """Forward- and reverse-order token grids (T, B) with the active mask.

    Pads past each sequence's true length are never read: they are replaced by
    the pad index and the step is marked inactive.
    """
    lengths = np.array([s.true_length for s in seqs], dtype=np.int64)
    if len(seqs) == 0 or lengths.min() < 1:
        raise EmptyInput("every sequence needs at least one token")
    T = int(lengths.max())
    B = len(seqs)
    grid = np.zeros((B, T), dtype=np.int64)
    for b, s in enumerate(seqs):
        grid[b, : s.true_length] = s.tokens[: s.true_length]
    if vocab_size is not None and (grid.min() < 0 or grid.max() >= vocab_size):
        raise TokenOutOfRange(f"token outside [0, {vocab_size})")
    steps = np.arange(T)
    active = steps[None, :] < lengths[:, None]  # (B, T)
    rev_idx = np.where(active, lengths[:, None] - 1 - steps[None, :], 0)
    rev = np.where(active, np.take_along_axis(grid, rev_idx, axis=1), codec.PAD_INDEX)
    return grid.T.copy(), rev.T.copy(), active.T.copy()


def _scan(p: LstmParams, embedding: np.ndarray, tokens: np.ndarray, active: np.ndarray):
    T, B = tokens.shape
    tr = DirectionTrace(tokens=tokens, active=active)
    U = p.units
    if embedding.shape[1] != p.input_dim:
        raise DimensionMismatch(f"embedding width {embedding.shape[1]} vs cell input {p.input_dim}")
    W, b = stacked_gates(p)
    state = zero_state(U, B)
    for t in range(T):
        hx = np.concatenate([state.h, embedding[tokens[t]]], axis=1)
        new, gates = _cell(W, b, hx, state.c, U)
        a = active[t][:, None]
        tr.inputs.append(hx)
        tr.prev.append(state)
        tr.gates.append(gates)
        tr.c_new.append(new.c)
        state = LstmState(np.where(a, new.h, state.h), np.where(a, new.c, state.c))
    return state, tr


def forward_batch(model: BilstmModel, seqs, dropout_mask: np.ndarray | None = None):
    """Outputs (B, n_tasks) and the trace needed for backpropagation."""
    fwd_tok, bwd_tok, active = stack_tokens(seqs, model.vocab.size)
    emb = model.embedding
    fwd_final, fwd_tr = _scan(model.forward_cell, emb, fwd_tok, active)
    bwd_final, bwd_tr = _scan(model.backward_cell, emb, bwd_tok, active)
    rep = concat(fwd_final.h, bwd_final.h)
    if dropout_mask is not None:
        dropout_mask = np.asarray(dropout_mask, dtype=np.float64)
        if dropout_mask.shape[-1] != rep.shape[-1]:
            raise DimensionMismatch(f"dropout mask width {dropout_mask.shape} vs {rep.shape}")
        head_in = rep * dropout_mask
    else:
        head_in = rep
    logits = affine(model.head_W, head_in, model.head_b)
    output = sigmoid(logits) if model.task_kind == CLASSIFICATION else logits
    return output, ForwardTrace(fwd_tr, bwd_tr, rep, dropout_mask, head_in, logits, output)


def representation(model: BilstmModel, seq: EncodedSequence) -> np.ndarray:
    _, trace = forward_batch(model, [seq])
    return trace.rep[0]


def forward(model: BilstmModel, seq: EncodedSequence, dropout_mask=None):
    mask = None if dropout_mask is None else np.asarray(dropout_mask)[None, :]
    out, trace = forward_batch(model, [seq], mask)
    return out[0], trace


def encode_for(model: BilstmModel, smiles: str) -> EncodedSequence:
    return codec.encode(model.vocab, smiles, model.max_len)


def predict(model: BilstmModel, smiles: str) -> np.ndarray:
    return forward(model, encode_for(model, smiles))[0]


def predict_many(model: BilstmModel, smiles_list, batch_size: int = 64) -> np.ndarray:
    seqs = [encode_for(model, s) for s in smiles_list]
    return predict_encoded(model, seqs, batch_size)


def predict_encoded(model: BilstmModel, seqs, batch_size: int = 64) -> np.ndarray:
    if not seqs:
        return np.zeros((0, model.n_tasks))
    # sorting by length keeps padding waste low; results go back in input order
    order = sorted(range(len(seqs)), key=lambda k: seqs[k].true_length)
    out = np.empty((len(seqs), model.n_tasks))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        out[idx] = forward_batch(model, [seqs[k] for k in idx])[0]
    return out


# -- model file --------------------------------------------------------------


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_model(model: BilstmModel) -> str:
    lines = [f"{FORMAT_MAGIC} v{FORMAT_VERSION}"]
    cfg = dataclasses.asdict(model.config)
    for key, value in cfg.items():
        lines.append(f"{key}={json.dumps(value)}")
    lines.append(f"task_kind={model.task_kind}")
    lines.append(f"tasks={json.dumps(list(model.task_names))}")
    lines.append(f"model_max_len={model.max_len}")
    vlines = codec.vocab_lines(model.vocab)
    lines.append(f"vocab {len(vlines)}")
    lines.extend(vlines)
    for name in PARAM_ORDER:
        arr = model.params[name]
        if arr.ndim == 2:
            lines.append(f"param {name} {arr.shape[0]} {arr.shape[1]}")
            lines.extend(" ".join(_fmt(v) for v in row) for row in arr)
        else:
            lines.append(f"param {name} {arr.shape[0]}")
            lines.append(" ".join(_fmt(v) for v in arr))
    body = "\n".join(lines) + "\n"
    return body + f"checksum={fnv1a_64(body.encode('utf-8')):016x}\n"


def loads_model(text: str) -> BilstmModel:
    first = text.split("\n", 1)[0]
    magic, _, version = first.partition(" v")
    if magic != FORMAT_MAGIC or not version.isdigit():
        raise ModelFormatError(f"not a model file (header {first!r})")
    if int(version) != FORMAT_VERSION:
        raise FormatVersionMismatch(f"file is format v{version}, reader supports v{FORMAT_VERSION}")
    cut = text.rstrip("\n").rfind("\n")
    body, tail = text[: cut + 1], text[cut + 1 :].strip()
    if not tail.startswith("checksum="):
        raise ModelFormatError("missing checksum line")
    try:
        stored = int(tail[len("checksum="):], 16)
    except ValueError:
        raise ChecksumMismatch("unreadable checksum") from None
    if stored != fnv1a_64(body.encode("utf-8")):
        raise ChecksumMismatch("model file checksum does not match its contents")

    lines = body.split("\n")[1:]
    pos = 0
    header = {}
    while not lines[pos].startswith("vocab "):
        key, _, value = lines[pos].partition("=")
        header[key] = value
        pos += 1
    n_vocab = int(lines[pos].split()[1])
    vocab = codec.parse_vocab_lines(lines[pos + 1 : pos + 1 + n_vocab])
    pos += 1 + n_vocab
    params = {}
    for name in PARAM_ORDER:
        parts = lines[pos].split()
        if parts[:2] != ["param", name]:
            raise ModelFormatError(f"expected parameter block {name!r}, got {lines[pos]!r}")
        shape = tuple(int(s) for s in parts[2:])
        nrows = shape[0] if len(shape) == 2 else 1
        rows = [[float(v) for v in lines[pos + 1 + r].split()] for r in range(nrows)]
        params[name] = np.array(rows, dtype=np.float64).reshape(shape)
        pos += 1 + nrows

    cfg_fields = {f.name for f in dataclasses.fields(Hyperparams)}
    config = Hyperparams(**{k: json.loads(v) for k, v in header.items() if k in cfg_fields})
    return BilstmModel(
        vocab=vocab,
        params=params,
        task_names=tuple(json.loads(header["tasks"])),
        task_kind=header["task_kind"],
        config=config,
        max_len=int(header["model_max_len"]),
    )


def save_model(model: BilstmModel, path) -> None:
    Path(path).write_bytes(dumps_model(model).encode("utf-8"))


def load_model(path) -> BilstmModel:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ChecksumMismatch(f"model file is not valid UTF-8: {exc}") from None
    return loads_model(text)
