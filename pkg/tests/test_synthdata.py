import numpy as np
import pytest

from neuralannot import synthdata
from neuralannot.annotator import NetConfig, RegressorNet, TrainConfig, annotate_dataset, train
from neuralannot.bodymodel import PART_JOINTS, model_forward, save_model
from neuralannot.camera import project
from neuralannot.dataset import load_dataset, load_ground_truth, load_with_ground_truth, save_dataset


def test_model_joint_counts():
    assert synthdata.gen_model(3, "body").n_joints == 22
    assert synthdata.gen_model(3, "hand").n_joints == 16
    assert PART_JOINTS["body"] == 22 and PART_JOINTS["hand"] == 16
    with pytest.raises(ValueError):
        synthdata.gen_model(0, "tail")


def test_same_seed_same_model_file(tmp_path, any_model):
    kind = any_model.part_kind
    save_model(synthdata.gen_model(7, kind), tmp_path / "a.json")
    save_model(synthdata.gen_model(7, kind), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    save_model(synthdata.gen_model(8, kind), tmp_path / "c.json")
    assert (tmp_path / "a.json").read_bytes() != (tmp_path / "c.json").read_bytes()


def test_generated_models_pass_invariants(any_model):
    any_model.validate()
    for name in ("weights", "joint_regressor", "eval_regressor"):
        arr = getattr(any_model, name, None)
        if arr is not None:
            np.testing.assert_allclose(arr.sum(axis=1), 1.0, atol=1e-9)
            assert arr.min() >= 0


def test_body_roles_and_mirror_symmetry(body_model):
    for side in ("right", "left"):
        for part in ("hip", "shoulder", "elbow", "wrist"):
            body_model.role(f"{side}_{part}")
    rest = body_model.template
    perm = synthdata.mirror_permutation(rest)
    np.testing.assert_allclose(rest[perm] * np.array([-1.0, 1.0, 1.0]), rest, atol=1e-9)
    r, l = body_model.role("right_wrist"), body_model.role("left_wrist")
    assert body_model.parents[r] != body_model.parents[l]


def test_zero_corruption_observations_are_exact(any_model):
    ds = synthdata.gen_dataset(any_model, 5, "aux", synthdata.Corruption(), seed=1)
    root = any_model.roles.get("root_eval_joint", 0)
    for s, theta in zip(ds.samples, ds.sealed):
        out = model_forward(any_model, theta)
        # aux joints live in a dataset frame translated from the model's
        rel = s.p3d - s.p3d[root]
        np.testing.assert_allclose(rel, out.joints3d - out.joints3d[root], atol=1e-12)
        assert s.vis3d.all()
        np.testing.assert_allclose(s.p2d, project(out.joints3d, theta.camera), atol=1e-9)
    assert len(ds.samples[0].feature) == synthdata.feature_dim(any_model)


def test_truncation_rate():
    model = synthdata.gen_model(0, "hand")
    ds = synthdata.gen_dataset(model, 1000, "target", synthdata.Corruption(truncation=0.3), seed=2)
    masked = 1.0 - np.mean([s.vis2d.mean() for s in ds.samples])
    assert abs(masked - 0.3) <= 0.05
    assert all(s.p3d is None for s in ds.samples)


def test_missing_joints_never_drop_root(hand_model):
    ds = synthdata.gen_dataset(hand_model, 200, "aux", synthdata.Corruption(missing3d=0.5), seed=3)
    vis = np.stack([s.vis3d for s in ds.samples])
    assert vis[:, 0].all()
    assert abs(1.0 - vis[:, 1:].mean() - 0.5) < 0.05


def test_same_seed_same_dataset_file(tmp_path, hand_model):
    c = synthdata.Corruption(noise3d=0.01, missing3d=0.1)
    save_dataset(synthdata.gen_dataset(hand_model, 20, "aux", c, seed=4), tmp_path / "a.json")
    save_dataset(synthdata.gen_dataset(hand_model, 20, "aux", c, seed=4), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_training_loader_hides_ground_truth(tmp_path, hand_model):
    ds = synthdata.gen_dataset(hand_model, 6, "target", seed=5)
    save_dataset(ds, tmp_path / "t.json")
    loaded = load_dataset(tmp_path / "t.json")
    assert loaded.sealed is None
    assert "sealed" not in loaded.to_dict()
    truth = load_ground_truth(tmp_path / "t.json")
    np.testing.assert_array_equal(truth[0].pose, ds.sealed[0].pose)
    assert load_with_ground_truth(tmp_path / "t.json").sealed is not None


class _Tripwire(list):
    """A sealed block that fails on any read."""

    def _fail(self, *a, **k):
        raise AssertionError("ground truth was read")

    __getitem__ = __iter__ = __len__ = __bool__ = __contains__ = _fail


def test_training_and_annotation_never_read_ground_truth(hand_model):
    aux = synthdata.gen_dataset(hand_model, 8, "aux", seed=6)
    aux.sealed = _Tripwire()
    net = RegressorNet(NetConfig.for_model(hand_model, synthdata.feature_dim(hand_model), hidden=8, pose_dim=8))
    train(net, hand_model, [aux], "ax", TrainConfig(batch_size=4, epochs=1))
    star = annotate_dataset(net, aux)
    assert star.annotated


def test_pose_corpus_is_low_rank(body_model):
    poses = synthdata.pose_corpus(body_model, 2000)
    sv = np.linalg.svd(poses - poses.mean(0), compute_uv=False) ** 2
    # most variance sits in a few directions of the 63-dimensional pose space
    assert sv[:16].sum() / sv.sum() > 0.9
