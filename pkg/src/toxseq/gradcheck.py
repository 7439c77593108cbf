"""Random tiny problems for checking BPTT against central differences."""

from __future__ import annotations

import numpy as np

from . import codec
from .model import CLASSIFICATION, PARAM_ORDER, REGRESSION, Hyperparams, init_model
from .tensor import Rng, init_uniform
from .train import backward, finite_diff_grad, make_dropout_mask, relative_errors

TINY_CHARS = "CNO()="  # with pad and unk: vocabulary of 8


def tiny_problem(seed: int, kind: str, dropout: bool, units=3, embed_dim=4, n_tasks=2,
                 batch=2, max_seq=6, param_scale=0.5):
    """Model with all parameters U[-scale, scale], a batch, and an optional fixed mask."""
    rng = Rng(seed)
    vocab = codec.Vocabulary.from_chars(TINY_CHARS)
    config = Hyperparams(units=units, embed_dim=embed_dim, dropout_rate=0.0, clip_norm=None, seed=seed)
    names = [f"t{k}" for k in range(n_tasks)]
    model = init_model(vocab, names, kind, config, max_seq, rng.spawn())
    params = {
        name: init_uniform(rng, *np.atleast_2d(arr).shape, param_scale).reshape(arr.shape)
        for name, arr in model.params.items()
    }
    model = model.with_params(params)

    examples = []
    for _ in range(batch):
        length = 1 + int(rng.uniform() * max_seq)
        toks = np.zeros(max_seq, dtype=np.int64)
        # indices 1..7: unk and every character
        toks[:length] = 1 + (rng.uniform(length) * (vocab.size - 1)).astype(np.int64)
        seq = codec.EncodedSequence(tokens=toks, true_length=length)
        if kind == CLASSIFICATION:
            labels = (rng.uniform(n_tasks) < 0.5).astype(np.float64)
        else:
            labels = 4.0 * rng.uniform(n_tasks) - 2.0
        examples.append((seq, labels, np.ones(n_tasks, dtype=bool)))
    mask = make_dropout_mask(rng, (batch, 2 * units), 0.3) if dropout else None
    return model, examples, mask


def check(seed: int, kind: str, dropout: bool, eps: float = 1e-4, perturb: float = 0.0) -> dict:
    model, batch, mask = tiny_problem(seed, kind, dropout)
    _, analytic = backward(model, batch, mask)
    if perturb:
        # negative control: corrupt one block so the check must fail
        analytic = dict(analytic)
        analytic["fwd.W_c"] = analytic["fwd.W_c"] * (1.0 + perturb) + perturb
    numeric = finite_diff_grad(model, batch, eps, mask)
    return relative_errors(analytic, numeric)


def run(seeds=range(1), eps: float = 1e-4, perturb: float = 0.0) -> dict:
    """Worst relative error per parameter block over seeds, both heads, dropout off/on."""
    worst = {name: 0.0 for name in PARAM_ORDER}
    for seed in seeds:
        for kind in (CLASSIFICATION, REGRESSION):
            for dropout in (False, True):
                errs = check(seed, kind, dropout, eps, perturb)
                for name, e in errs.items():
                    worst[name] = max(worst[name], e)
    return worst
