import os
from pathlib import Path

import numpy as np
import pytest

from toxseq import codec
from toxseq.model import CLASSIFICATION, Hyperparams, init_model
from toxseq.tensor import Rng, init_uniform

DATA_DIR = Path(os.environ.get("TOXSEQ_DATA", Path(__file__).resolve().parent.parent / "data"))
CLINTOX_CSV = DATA_DIR / "clintox.csv"
FREESOLV_CSV = DATA_DIR / "freesolv.csv"

CORPUS = ["CCO", "c1ccccc1O", "CC(=O)Oc1ccccc1C(=O)O", "C#N", "CN1C=NC2=C1C(=O)N(C)C(=O)N2C", "ClCCl"]


def random_model(seed=0, units=4, embed_dim=3, n_tasks=2, kind=CLASSIFICATION, corpus=CORPUS, scale=0.6):
    vocab = codec.build_vocab(corpus)
    cfg = Hyperparams(units=units, embed_dim=embed_dim, seed=seed)
    model = init_model(vocab, [f"t{k}" for k in range(n_tasks)], kind, cfg, max(map(len, corpus)))
    rng = Rng(seed + 1000)
    params = {
        k: init_uniform(rng, *np.atleast_2d(v).shape, scale).reshape(v.shape)
        for k, v in model.params.items()
    }
    return model.with_params(params)


@pytest.fixture
def small_model():
    return random_model()


def need(path: Path):
    if not path.exists():
        pytest.fail(f"dataset {path} is missing; see README (Datasets)")
    return path
