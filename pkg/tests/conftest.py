import numpy as np
import pytest

from mmea.synth import SynthConfig, make_task

TINY_DIMS = {"image": 6, "relation": 5, "attribute": 5, "surface": 4}
TINY_NOISE = {"image": 0.3, "relation": 0.3, "attribute": 0.3, "surface": 0.3}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_task(n=10, seed=0, **kw):
    kw.setdefault("dims", dict(TINY_DIMS))
    kw.setdefault("noise", dict(TINY_NOISE))
    kw.setdefault("n_triples", 2 * n)
    kw.setdefault("seed_fraction", 0.5)
    return make_task(SynthConfig(n_entities=n, seed=seed, latent_dim=4, **kw))[0]


@pytest.fixture
def task10():
    return tiny_task(10)


@pytest.fixture
def task20():
    return tiny_task(20)
