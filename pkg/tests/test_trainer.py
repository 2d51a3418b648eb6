import csv
import itertools

import numpy as np
import pytest

from retrieval_zsl.embedding_model import init_params
from retrieval_zsl.errors import ArgumentError
from retrieval_zsl.evaluation import retrieval_top1
from retrieval_zsl.feature_store import SynthConfig, synth_generate
from retrieval_zsl.trainer import (
    GradientSet, RawBatch, TrainConfig, backward, gradcheck, gradcheck_fixture, head_labels,
    numeric_gradient, relative_error, sgd_step, train,
)

GRID = list(itertools.product([0.0, 0.5, 1.0], repeat=2))


def test_single_instance_retrieval_gradient_is_zero():
    raw, params = gradcheck_fixture(B=1)
    report, grads = backward(raw, params, lam=1.0, kappa=0.0)
    assert report.total == 0.0
    assert all(not g.any() for g in grads.arrays())


@pytest.mark.parametrize("metric", ["sqeuclid", "cosine_dist"])
@pytest.mark.parametrize("lam,kappa", GRID)
def test_backward_matches_finite_differences(lam, kappa, metric):
    raw, params = gradcheck_fixture(B=4, Dz=8, seed=11)
    result = gradcheck(raw, params, lam, kappa, metric, h=1e-4, tolerance=1e-4)
    assert result.passed, result.max_rel_error


def test_gradcheck_detects_bug():
    raw, params = gradcheck_fixture(B=4, Dz=8, seed=11)
    assert not gradcheck(raw, params, 0.5, 0.5, perturb=1e-3).passed


def test_numeric_gradient_on_quadratic_direction():
    # numeric gradient itself: directional derivative agrees with analytic one
    raw, params = gradcheck_fixture(B=3, Dz=4, seed=2)
    _, g = backward(raw, params, 0.5, 0.5)
    n = numeric_gradient(raw, params, 0.5, 0.5)
    for a, b in zip(g.arrays(), n.arrays()):
        assert relative_error(a, b).max() < 1e-4


def test_duplicated_batch_keeps_classifier_gradients(rng):
    raw, params = gradcheck_fixture(B=4, seed=5)
    doubled = RawBatch(np.concatenate([raw.image] * 2), np.concatenate([raw.text] * 2),
                       np.concatenate([raw.labels] * 2))
    # kappa=1 isolates the classification terms
    _, g1 = backward(raw, params, 0.5, 1.0)
    _, g2 = backward(doubled, params, 0.5, 1.0)
    for a, b in zip(g1.arrays(), g2.arrays()):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_sgd_step():
    p = init_params(2, 2, 2, 2, seed=0)
    g = GradientSet(*(np.ones_like(a) for a in p.arrays()))
    same = sgd_step(p, g, 0.0)
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), same.arrays()))
    zero = GradientSet(*(np.zeros_like(a) for a in p.arrays()))
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), sgd_step(p, zero, 0.3).arrays()))
    p.Wv[0, 0] = 1.0
    g.Wv[0, 0] = 2.0
    assert sgd_step(p, g, 0.1).Wv[0, 0] == pytest.approx(0.8, abs=1e-15)


def test_descent_on_fixed_batch():
    raw, params = gradcheck_fixture(B=6, Dz=8, seed=9)
    losses = []
    for _ in range(21):
        report, grads = backward(raw, params, 0.5, 0.5)
        losses.append(report.total)
        params = sgd_step(params, grads, 1e-3)
    assert all(b < a + 1e-9 and b < a for a, b in zip(losses, losses[1:]))


def test_train_zero_steps_returns_init(small_synth):
    bundle, split = small_synth
    p0, log = train(bundle, split, TrainConfig(steps=0, embed_dim=4, seed=3))
    assert log.rows == []
    p0b, _ = train(bundle, split, TrainConfig(steps=0, embed_dim=4, seed=3))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p0.arrays(), p0b.arrays()))
    assert not p0.bv.any() and not p0.bi.any()


def test_train_deterministic(small_synth):
    bundle, split = small_synth
    cfg = TrainConfig(steps=50, batch_size=8, embed_dim=6, seed=21)
    a, la = train(bundle, split, cfg)
    b, lb = train(bundle, split, cfg)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))
    assert la.totals() == lb.totals()
    c, _ = train(bundle, split, cfg.replace(seed=22))
    assert not np.array_equal(a.Wv, c.Wv)


def test_lr_schedule_and_log(tmp_path, small_synth):
    bundle, split = small_synth
    _, log = train(bundle, split, TrainConfig(steps=7, batch_size=4, embed_dim=3, lr=0.1,
                                              lr_decay_every=3, lr_decay_factor=0.1))
    lrs = [lr for _, lr, _ in log.rows]
    assert lrs == pytest.approx([0.1] * 3 + [0.01] * 3 + [0.001])
    log.write_csv(tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["step", "lr", "j_tr", "j_ir", "j_tc", "j_ic", "total"]
    assert len(rows) == 8


def test_train_errors(small_synth):
    bundle, split = small_synth
    with pytest.raises(ArgumentError):
        train(bundle, split, TrainConfig(batch_size=10_000))
    with pytest.raises(ArgumentError):
        TrainConfig(lr=0.0)
    with pytest.raises(ArgumentError):
        TrainConfig(lam=-0.1)
    with pytest.raises(ArgumentError):
        head_labels(np.array([0, 5]), {0, 1})


@pytest.mark.slow
def test_easy_bundle_retrieval():
    bundle, split = synth_generate(SynthConfig(num_seen=6, num_unseen=2, noise_sigma=0.05, seed=0))
    cfg = TrainConfig(steps=2000, lam=0.5, kappa=0.5, seed=0)
    params, log = train(bundle, split, cfg)
    assert log.totals()[-1] < log.totals()[0]
    top1 = retrieval_top1(params, bundle, split.train_ids, cfg.batch_size, seed=1)
    assert top1 >= 0.95
