import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralannot import rotmath, synthdata
from neuralannot.annotator import TrainConfig
from neuralannot.bodymodel import eval_joints
from neuralannot.dataset import Dataset
from neuralannot.errors import DegenerateConfiguration, DimensionMismatch, MissingGroundTruth, NoVisibleJoints
from neuralannot.evalmetrics import (
    direct_3d_error,
    err2d,
    indirect_3d_error,
    mpjpe,
    mpvpe,
    pa_mpjpe,
    pck_auc,
    per_sample_3d_error,
    report,
)

from conftest import random_rotvec
from oracles import mpjpe_loop


def _similarity(rng):
    return rng.uniform(0.3, 3.0), rotmath.aa_to_mat(random_rotvec(rng, 1)[0]), rng.normal(size=3)


def test_mpjpe_examples(rng):
    x = rng.normal(size=(17, 3))
    assert mpjpe(x, x) == 0.0
    assert mpjpe(x + np.array([0.001, 0.0, 0.0]), x) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(DimensionMismatch):
        mpjpe(x, x[:-1])


def test_mpjpe_matches_loop_oracle(rng):
    for _ in range(20):
        a, b = rng.normal(size=(2, 21, 3))
        assert mpjpe(a, b) == pytest.approx(mpjpe_loop(a, b), abs=1e-9)
        assert mpvpe(a, b) == pytest.approx(mpjpe_loop(a, b), abs=1e-9)


def test_pa_mpjpe_removes_similarity(rng):
    for _ in range(20):
        gt = rng.normal(size=(17, 3))
        s, R, t = _similarity(rng)
        assert pa_mpjpe(s * gt @ R.T + t, gt) < 1e-6
        pred = gt + 0.05 * rng.normal(size=gt.shape)
        assert pa_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pa_mpjpe_invariance(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(12, 3))
    pred = gt + 0.1 * rng.normal(size=gt.shape)
    R = rotmath.aa_to_mat(random_rotvec(rng, 1)[0])
    moved = 2.0 * pred @ R.T + rng.normal(size=3)
    assert pa_mpjpe(moved, gt) == pytest.approx(pa_mpjpe(pred, gt), abs=1e-6)


def test_pa_mpjpe_degenerate(rng):
    with pytest.raises(DegenerateConfiguration):
        pa_mpjpe(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
    line = np.outer(np.arange(5.0), [1.0, 0.0, 0.0])
    with pytest.raises(DegenerateConfiguration):
        pa_mpjpe(line, rng.normal(size=(5, 3)))


def test_pa_mpjpe_batched(rng):
    gt = rng.normal(size=(4, 10, 3))
    pred = gt + 0.02 * rng.normal(size=gt.shape)
    assert pa_mpjpe(pred, gt) == pytest.approx(np.mean([pa_mpjpe(p, g) for p, g in zip(pred, gt)]), rel=1e-12)


def test_pck_auc_examples(rng):
    gt = rng.normal(size=(20, 3))
    assert pck_auc(gt, gt) == 1.0
    assert pck_auc(gt + 0.06, gt) == 0.0
    half = gt.copy()
    half[10:] += np.array([0.0, 0.0, 0.2])
    # step curve: 0.5 everywhere, so the area is 0.5 up to the first trapezoid
    step = 50.0 / 99
    assert pck_auc(half, gt) == pytest.approx(0.5, abs=step / 50.0)


def test_pck_auc_monotone_under_inflation(rng):
    gt = rng.normal(size=(30, 3))
    d = 0.03 * rng.normal(size=gt.shape)
    values = [pck_auc(gt + k * d, gt) for k in np.linspace(0.0, 3.0, 13)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_err2d_examples(hand_model):
    ds = synthdata.gen_dataset(hand_model, 1, "target", synthdata.Corruption(truncation=0.0), seed=2)
    theta, s = ds.sealed[0], ds.samples[0]
    assert err2d(hand_model, theta, s.p2d, s.vis2d) < 1e-9
    vis = np.zeros(hand_model.n_eval, dtype=bool)
    vis[4] = True
    p2d = s.p2d.copy()
    p2d[4] += np.array([3.0, 4.0])
    assert err2d(hand_model, theta, p2d, vis) == pytest.approx(5.0, abs=1e-9)
    p2d[7] += 100.0
    assert err2d(hand_model, theta, p2d, vis) == pytest.approx(5.0, abs=1e-9)
    with pytest.raises(NoVisibleJoints):
        err2d(hand_model, theta, p2d, np.zeros(hand_model.n_eval, dtype=bool))


def test_direct_3d_error(hand_model):
    ds = synthdata.gen_dataset(hand_model, 6, "aux", seed=3)
    exact = ds.with_params(ds.sealed)
    assert direct_3d_error(hand_model, exact) == pytest.approx(0.0, abs=1e-9)
    other = synthdata.gen_dataset(hand_model, 6, "aux", seed=4)
    star = ds.with_params(other.sealed)
    pred = eval_joints(hand_model, other.sealed)
    gt = eval_joints(hand_model, ds.sealed)
    oracle = np.mean([mpjpe_loop(p - p[0], g - g[0]) for p, g in zip(pred, gt)])
    assert direct_3d_error(hand_model, star) == pytest.approx(oracle, abs=1e-9)
    assert per_sample_3d_error(hand_model, star).shape == (6,)
    with pytest.raises(MissingGroundTruth):
        direct_3d_error(hand_model, Dataset("aux", "hand", []))
    with pytest.raises(MissingGroundTruth):
        direct_3d_error(hand_model, star.training_view())
    with pytest.raises(MissingGroundTruth):
        direct_3d_error(hand_model, ds)


def test_report_rows(hand_model):
    ds = synthdata.gen_dataset(hand_model, 4, "target", seed=5)
    rows = report(hand_model, ds.with_params(ds.sealed))
    names = [r[0] for r in rows]
    assert names == ["direct_3d_error", "pa_mpjpe", "pck_auc", "err2d"]
    values = dict((r[0], r[1]) for r in rows)
    assert values["direct_3d_error"] < 1e-9 and values["pck_auc"] == 1.0
    assert all(r[2] == 4 for r in rows)


def test_indirect_error_prefers_exact_labels(hand_model):
    train = synthdata.gen_dataset(hand_model, 400, "target", seed=6)
    test = synthdata.gen_dataset(hand_model, 16, "target", seed=7)
    cfg = TrainConfig(batch_size=32, epochs=30)
    good = indirect_3d_error(hand_model, train.with_params(train.sealed), test, cfg, hidden=64)
    wrong = synthdata.gen_dataset(hand_model, 400, "target", seed=8).sealed
    bad = indirect_3d_error(hand_model, train.with_params(wrong), test, cfg, hidden=64)
    assert good < bad
    with pytest.raises(MissingGroundTruth):
        indirect_3d_error(hand_model, train, test, cfg)
