import numpy as np
import pytest

from ssl_reweight import network
from ssl_reweight.data import make_dataset
from ssl_reweight.linalg import make_rng
from ssl_reweight.objective import onehot


def random_net(seed, input_dim=2, hidden=8, classes=3, depth=2, binary=False):
    return network.mlp(input_dim, hidden, classes, depth=depth, seed=seed, binary=binary)


def random_batch(seed, n, input_dim=2, classes=3, scale=1.5):
    rng = make_rng(seed + 10_000)
    x = scale * rng.standard_normal((n, input_dim))
    y = rng.integers(0, classes, n)
    return x, onehot(y, classes)


def perturb_biases(params, seed):
    # nonzero biases keep finite differences away from degenerate symmetric points
    rng = make_rng(seed + 20_000)
    for _, b in params.layers:
        b += 0.1 * rng.standard_normal(b.shape)
    return params


@pytest.fixture(scope="session")
def moons():
    return make_dataset("moons", seed=0)
