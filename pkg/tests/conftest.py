"""Shared fixtures: disk-cached trained models for the acceptance suite.

Training a desk-scale model takes minutes, so checkpoints are cached under
.cache/models keyed by a digest of everything that influences the result
(model config, training params, data recipe). Delete the directory to force
retraining.
"""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from gridlang.codec import Vocabulary
from gridlang.model import Model, ModelConfig
from gridlang.synth import GenParams, generate
from gridlang.train import TrainParams, train_loop

CACHE_DIR = Path(__file__).resolve().parent.parent / ".cache" / "models"

# held-out evaluation seeds start far above any training seed
VAL_SEED_BASE = 10_000_000


def _digest(*parts) -> str:
    payload = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def make_dataset(count: int, seed_base: int = 0,
                 gen: GenParams | None = None) -> list:
    gen = gen or GenParams()
    return [generate(seed_base + i, gen) for i in range(count)]


def cached_train(tag: str, cfg: ModelConfig, params: TrainParams,
                 data_count: int, gen: GenParams | None = None,
                 data_seed: int = 0) -> Model:
    """Train (or load a cached) model for the given recipe."""
    gen = gen or GenParams()
    key = _digest(tag, vars(cfg), vars(params), data_count, vars(gen),
                  data_seed)
    vocab = Vocabulary()
    ckpt = CACHE_DIR / f"{tag}-{key}" / "ckpt_final.bin"
    if ckpt.exists():
        return Model.load(ckpt, cfg, vocab)
    dataset = make_dataset(data_count, seed_base=data_seed, gen=gen)
    model = Model(cfg, vocab, seed=params.seed)
    train_loop(model, dataset, params, ckpt.parent)
    return model


def val_scenes(count: int, offset: int = 0,
               gen: GenParams | None = None) -> list:
    return [generate(VAL_SEED_BASE + offset + i, gen or GenParams())
            for i in range(count)]


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------------------
# trained models for the acceptance suite (all disk-cached)
# ---------------------------------------------------------------------------

# scenes used for the end-to-end learning targets: moderately sized shapes
# (detection at 64x64 needs a few pixels of slack per box edge) with limited
# rotation — heavily rotated squares/bars are not class-separable at this
# resolution and model scale
E2E_GEN = GenParams(min_shapes=2, max_shapes=3, min_scale=14.0,
                    max_scale=26.0, max_rotation=0.4)
SINGLE_GEN = GenParams(min_shapes=1, max_shapes=1, min_scale=14.0,
                       max_scale=26.0, max_rotation=0.4)


@pytest.fixture(scope="session")
def detect_model():
    """Detection model for the end-to-end learning target."""
    # anchors interpolated from encoded image features: markedly better
    # box-digit learning at this budget than raw patch embeddings
    cfg = ModelConfig(anchor_source="encoded")
    params = TrainParams(iters=10000, batch_size=8, lr=8e-4, warmup=300,
                         tasks={"detect": 1.0}, grid_k=4, grid_budget=8,
                         repeat_k=1, log_every=50, seed=0)
    return cached_train("detect", cfg, params, data_count=5000, gen=E2E_GEN)


@pytest.fixture(scope="session")
def refer_model():
    cfg = ModelConfig()
    params = TrainParams(iters=4000, batch_size=8, lr=4e-4, warmup=150,
                         tasks={"refer": 1.0}, log_every=40, seed=0)
    return cached_train("refer", cfg, params, data_count=5000, gen=E2E_GEN)


@pytest.fixture(scope="session")
def semseg_model():
    cfg = ModelConfig()
    params = TrainParams(iters=5000, batch_size=8, lr=4e-4, warmup=150,
                         tasks={"semseg": 1.0}, log_every=40, seed=0)
    return cached_train("semseg", cfg, params, data_count=5000, gen=E2E_GEN)


@pytest.fixture(scope="session")
def depthnorm_model():
    cfg = ModelConfig()
    params = TrainParams(iters=1500, batch_size=8, lr=4e-4, warmup=100,
                         tasks={"depth": 1.0, "normals": 1.0},
                         log_every=50, seed=0)
    return cached_train("depthnorm", cfg, params, data_count=2000,
                        gen=E2E_GEN)


def _refer_params(iters=2000):
    return TrainParams(iters=iters, batch_size=8, lr=4e-4, warmup=100,
                       tasks={"refer": 1.0}, log_every=50, seed=0)


@pytest.fixture(scope="session")
def masktoken_models():
    """Matched-budget referring-segmentation runs at N = 1, 2, 4."""
    out = {}
    for side in (1, 2, 4):
        cfg = ModelConfig(mask_tokens_side=side)
        out[side] = cached_train(f"mask{side}", cfg, _refer_params(),
                                 data_count=2000, gen=E2E_GEN)
    return out


def _detect_params(repeat_k=1, copy_paste=0.0, iters=2500):
    return TrainParams(iters=iters, batch_size=8, lr=8e-4, warmup=200,
                       tasks={"detect": 1.0}, grid_k=4, grid_budget=8,
                       repeat_k=repeat_k, copy_paste_prob=copy_paste,
                       log_every=50, seed=0)


@pytest.fixture(scope="session")
def strategy_models():
    """Matched-budget detection runs: baseline / repeat-GT / copy-paste / both."""
    recipes = {
        "baseline": _detect_params(),
        "repeat": _detect_params(repeat_k=3),
        "copypaste": _detect_params(copy_paste=0.5),
        "both": _detect_params(repeat_k=3, copy_paste=0.5),
    }
    cfg = ModelConfig(anchor_source="encoded")
    return {name: cached_train(f"strat-{name}", cfg, p,
                               data_count=2000, gen=E2E_GEN)
            for name, p in recipes.items()}
