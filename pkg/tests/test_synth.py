import math

import numpy as np
import pytest

from crossfeat.features import build_gt_correspondences, landmark_correspondences
from crossfeat.synth import (MIN_SEPARATION_PX, DescriptorProfile, DetectorProfile, HomographyFamily,
                             SceneGenerationError, SceneSpec, combination_count, gen_scene, load_dataset,
                             make_pair_dataset, render_view, save_dataset)

DESC = DescriptorProfile("descA", 16, seed=3)


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(7)
    with pytest.raises(ValueError):
        DetectorProfile("d", detect_prob=1.5)
    with pytest.raises(ValueError):
        DetectorProfile("d", jitter_px=-1.0)
    with pytest.raises(ValueError):
        DetectorProfile("d", private_fraction=1.0)


def test_gen_scene_is_deterministic_and_well_formed():
    spec = SceneSpec(300, latent_dim=12, seed=5)
    a, b = gen_scene(spec), gen_scene(spec)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.latents, b.latents)
    assert len(a) == 300 and a.shared.all()
    np.testing.assert_allclose(np.linalg.norm(a.latents, axis=1), 1.0, atol=1e-12)
    d = np.sqrt(((a.positions[:, None] - a.positions[None]) ** 2).sum(-1))
    d[np.diag_indices(len(d))] = np.inf
    assert d.min() >= MIN_SEPARATION_PX
    assert not np.array_equal(gen_scene(SceneSpec(300, 12, seed=6)).positions, a.positions)


def test_gen_scene_infeasible_separation():
    with pytest.raises(SceneGenerationError):
        gen_scene(SceneSpec(2000, width=40, height=40))


def test_private_landmarks():
    dets = [DetectorProfile("a", private_fraction=0.5), DetectorProfile("b", private_fraction=0.25)]
    scene = gen_scene(SceneSpec(120, seed=1), dets)
    assert (scene.owner == "").sum() == 120
    assert (scene.owner == "a").sum() == 120 and (scene.owner == "b").sum() == 40


def test_render_zero_probability_is_empty():
    scene = gen_scene(SceneSpec(50))
    fs = render_view(scene, np.eye(3), DetectorProfile("d", detect_prob=0.0), DESC)
    assert len(fs) == 0 and fs.descriptors.shape == (0, 16)


def test_render_noiseless_detectors_coincide():
    quiet = dict(detect_prob=1.0, jitter_px=0.0, scale_noise=0.0, orientation_noise=0.0)
    scene = gen_scene(SceneSpec(80, seed=2))
    a = render_view(scene, np.eye(3), DetectorProfile("a", **quiet), DESC)
    b = render_view(scene, np.eye(3), DetectorProfile("b", **quiet), DESC)
    order_a, order_b = np.argsort(a.landmark_ids), np.argsort(b.landmark_ids)
    np.testing.assert_array_equal(a.landmark_ids[order_a], b.landmark_ids[order_b])
    np.testing.assert_array_equal(a.keypoints[order_a], b.keypoints[order_b])
    # the detector transform still separates the descriptors
    assert np.abs(a.descriptors[order_a] - b.descriptors[order_b]).max() > 0.1
    np.testing.assert_allclose(np.linalg.norm(a.descriptors, axis=1), 1.0, atol=1e-6)


def test_render_keypoints_follow_homography():
    scene = gen_scene(SceneSpec(60, seed=4))
    h = HomographyFamily().sample(np.random.default_rng(0), 640, 480)
    det = DetectorProfile("a", detect_prob=1.0, jitter_px=0.0)
    fs = render_view(scene, h, det, DESC, view=1)
    p = np.column_stack([scene.positions[fs.landmark_ids], np.ones(len(fs))]) @ h.T
    np.testing.assert_allclose(fs.keypoints[:, :2], p[:, :2] / p[:, 2:], atol=1e-3)


def test_shared_landmark_count_matches_binomial_oracle():
    pa, pb, n = 0.8, 0.6, 40
    da, db = DetectorProfile("a", detect_prob=pa), DetectorProfile("b", detect_prob=pb)
    total, mean, var = 0, 0.0, 0.0
    for t in range(200):
        scene = gen_scene(SceneSpec(n, seed=1000 + t), [da, db])
        fa = render_view(scene, np.eye(3), da, DESC, seed=t)
        fb = render_view(scene, np.eye(3), db, DESC, seed=t)
        total += len(np.intersect1d(fa.landmark_ids, fb.landmark_ids))
        visible = int(scene.shared.sum())
        mean += pa * pb * visible
        var += visible * pa * pb * (1 - pa * pb)
    assert abs(total - mean) <= 3 * math.sqrt(var)


def small_dataset(seed=0, scenes=4):
    dets = [DetectorProfile("detA"), DetectorProfile("detB", private_fraction=0.25)]
    descs = [DescriptorProfile("descA", 8, seed=1), DescriptorProfile("descB", 12, "superpoint", seed=2)]
    return make_pair_dataset(scenes, SceneSpec(30, latent_dim=6), dets, descs, seed=seed, val_fraction=0.5)


def test_make_pair_dataset_shape():
    ds = small_dataset()
    assert combination_count(ds.detectors, ds.descriptors) == 4
    for p in ds.pairs:
        assert len(p.features) == 2 * 4
    assert set(ds.splits["train"]).isdisjoint(ds.splits["val"])
    assert sorted(ds.splits["train"] + ds.splits["val"]) == [0, 1, 2, 3]
    # descriptors of one detector share keypoints
    p = ds.pairs[0]
    np.testing.assert_array_equal(p.view(0, "detA", "descA").keypoints, p.view(0, "detA", "descB").keypoints)


def test_make_pair_dataset_is_deterministic():
    a, b = small_dataset(), small_dataset()
    assert a.splits == b.splits
    for pa, pb in zip(a.pairs, b.pairs):
        np.testing.assert_array_equal(pa.h, pb.h)
        for k in pa.features:
            assert pa.features[k] == pb.features[k]
    c = small_dataset(seed=1)
    assert not np.array_equal(a.pairs[0].h, c.pairs[0].h)


def test_landmark_gt_equals_geometric_gt_without_jitter():
    quiet = dict(jitter_px=0.0, scale_noise=0.0, orientation_noise=0.0)
    dets = [DetectorProfile("detA", **quiet), DetectorProfile("detB", **quiet)]
    ds = make_pair_dataset(3, SceneSpec(80), dets, [DESC], seed=2)
    for p in ds.pairs:
        a, b = p.view(0, "detA", "descA"), p.view(1, "detB", "descA")
        geo = build_gt_correspondences(a, b, p.h, 1.0)
        lm = landmark_correspondences(a, b, p.h, 1.0)
        assert geo.as_set() == lm.as_set() and len(lm) > 0


def test_dataset_save_load_round_trip(tmp_path):
    ds = small_dataset()
    manifest = save_dataset(ds, tmp_path)
    assert len(list(tmp_path.glob("*.mcha"))) == 4 * 2 * 4
    back = load_dataset(tmp_path)
    assert back.splits == ds.splits and back.spec == ds.spec and back.family == ds.family
    assert back.detectors == ds.detectors and back.descriptors == ds.descriptors
    for pa, pb in zip(ds.pairs, back.pairs):
        np.testing.assert_array_equal(pa.h, pb.h)
        for k in pa.features:
            assert pa.features[k] == pb.features[k]
    save_dataset(back, tmp_path / "again")
    assert (tmp_path / "again" / "manifest.json").read_bytes() == manifest.read_bytes()
