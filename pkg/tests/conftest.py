from dataclasses import dataclass, replace

import numpy as np
import pytest

from advbct.compat import CompatLossConfig
from advbct.data import AllocationSpec, allocate, gen_synthetic, holdout_split, split_eval
from advbct.train import TrainConfig, train_new_compatible, train_old

BENCH_SEED = 0


@dataclass
class Bench:
    train: object
    query: object
    gallery: object
    old_train: object
    new_train: object
    old: object
    runs: dict
    cfg: TrainConfig
    ccfg: CompatLossConfig


def default_splits(seed=BENCH_SEED, kind="extended-data"):
    ds = gen_synthetic(20, 100, 32, 0.15, seed)
    train, holdout = holdout_split(ds, 20, seed)
    query, gallery = split_eval(holdout, 5, seed)
    old_train, new_train = allocate(train, AllocationSpec(kind, 0.3, seed))
    return train, query, gallery, old_train, new_train


@pytest.fixture(scope="session")
def bench():
    """Default synthetic benchmark, extended-data, every ablation trained once."""
    train, query, gallery, old_train, new_train = default_splits()
    cfg = TrainConfig(seed=BENCH_SEED)
    ccfg = CompatLossConfig()
    old = train_old(old_train, cfg)
    runs = {}
    for flags in ("cls", "cls+adv", "cls+p2s", "cls+adv+p2s"):
        runs[flags] = train_new_compatible(
            new_train, old.checkpoint, replace(cfg, flags=flags), ccfg, old.geometry
        )
    return Bench(train, query, gallery, old_train, new_train, old, runs, cfg, ccfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
