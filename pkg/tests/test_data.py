import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssl_reweight.data import (
    dataset_from_csv,
    dataset_to_csv,
    gen_circles,
    gen_linear,
    gen_moons,
    generate,
    make_dataset,
    raw_to_csv,
    split,
)
from ssl_reweight.trainer import TrainConfig, evaluate, train


def test_noiseless_circles_lie_on_their_rings():
    raw = gen_circles(200, noise=0.0, seed=0)
    r = np.linalg.norm(raw.x, axis=1)
    np.testing.assert_allclose(r, np.where(raw.y == 1, 1.0, 0.5), rtol=0, atol=1e-12)


def test_noiseless_moons_lie_on_their_arcs():
    raw = gen_moons(200, noise=0.0, seed=1)
    upper = raw.x[raw.y == 0]
    lower = raw.x[raw.y == 1]
    np.testing.assert_allclose(np.linalg.norm(upper, axis=1), 1.0, atol=1e-12)
    assert np.all(upper[:, 1] >= -1e-12)
    np.testing.assert_allclose(np.linalg.norm(lower - [1.0, 0.5], axis=1), 1.0, atol=1e-12)
    assert np.all(lower[:, 1] <= 0.5 + 1e-12)


def test_linear_respects_margin():
    raw = gen_linear(300, margin=2.0, seed=2)
    # the class-mean direction recovers the hyperplane normal on a sample this size
    mu = raw.x[raw.y == 1].mean(axis=0) - raw.x[raw.y == 0].mean(axis=0)
    normal = mu / np.linalg.norm(mu)
    gap = (raw.x[raw.y == 1] @ normal).min() - (raw.x[raw.y == 0] @ normal).max()
    assert gap >= 2.0 - 1e-9


@pytest.mark.parametrize("kind", ["linear", "circles", "moons"])
def test_generators_balanced_and_deterministic(kind):
    a = generate(kind, 101, seed=3)
    b = generate(kind, 101, seed=3)
    c = generate(kind, 101, seed=4)
    np.testing.assert_array_equal(a.x, b.x)
    assert not np.array_equal(a.x, c.x)
    assert abs(int((a.y == 0).sum()) - int((a.y == 1).sum())) <= 1


def test_generator_argument_errors():
    with pytest.raises(ValueError):
        generate("spirals", 100)
    with pytest.raises(ValueError):
        gen_moons(100, noise=-0.1)
    with pytest.raises(ValueError):
        gen_circles(2)
    with pytest.raises(ValueError):
        gen_linear(100, margin=-1.0)


def test_default_split_sizes_and_balance():
    d = make_dataset("moons", seed=0)
    assert d.sizes() == {"labeled": 10, "validation": 30, "unlabeled": 1000, "test": 200}
    assert (d.labeled_y == 0).sum() == 5
    assert (d.val_y == 0).sum() == 15


def test_splits_are_disjoint():
    d = make_dataset("circles", seed=5)
    pts = d.all_points()
    assert len({tuple(p) for p in pts}) == len(pts)


def test_split_too_small():
    with pytest.raises(ValueError):
        split(gen_moons(100), 10, 30, 1000)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["linear", "circles", "moons"]))
def test_csv_roundtrip_is_exact(seed, kind):
    d = make_dataset(kind, n=80, seed=seed, n_unlabeled=30)
    back = dataset_from_csv(dataset_to_csv(d))
    for name in ("labeled_x", "labeled_y", "val_x", "val_y", "unlabeled", "test_x", "test_y"):
        np.testing.assert_array_equal(getattr(back, name), getattr(d, name))
    np.testing.assert_array_equal(back.hidden_labels(), d.hidden_labels())
    assert dataset_to_csv(back) == dataset_to_csv(d)


def test_raw_csv_has_header_and_rows():
    text = raw_to_csv(gen_moons(6, seed=0))
    lines = text.splitlines()
    assert lines[0] == "split,id,x0,x1,label"
    assert len(lines) == 7


def test_csv_rejects_bad_input():
    with pytest.raises(ValueError):
        dataset_from_csv("a,b\n")
    with pytest.raises(ValueError):
        dataset_from_csv("split,id,x0,x1,label\nlabeled,1,0,0,0\n")
    with pytest.raises(ValueError):
        dataset_from_csv("split,id,x0,x1,label\nbogus,0,0,0,0\n")


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["moons", "circles"])
def test_tasks_are_realizable_by_the_network(kind):
    """With every training label revealed the network fits the task almost perfectly."""
    d = make_dataset(kind, n=1240, noise=0.1, seed=0)
    full = d.__class__(np.vstack([d.labeled_x, d.unlabeled]),
                       np.concatenate([d.labeled_y, d.hidden_labels()]),
                       d.val_x, d.val_y, d.unlabeled[:0], d.hidden_labels()[:0], d.test_x, d.test_y)
    cfg = TrainConfig(lambda_step=0.0, lambda_init=0.0, warmup_iters=0, outer_iters=100,
                      batch_labeled=100, theta_step=0.01, seed=0)
    res = train(cfg, full)
    assert 1.0 - evaluate(res.params, d.test_x, d.test_y)[1] >= 0.97
