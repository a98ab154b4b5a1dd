import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossfeat.augment import AugmentTrainConfig
from crossfeat.matching import (IncompatibleDescriptorsError, MatchList, MatchMode, MatchOptions, MissingModelError,
                                match_pipeline, nn_match)
from crossfeat.pipeline import ModelSet, build_branches, build_codecs, train_augment_stage, train_translate_stage
from crossfeat.synth import DescriptorProfile, DetectorProfile, SceneSpec, make_pair_dataset
from crossfeat.translate import TranslateTrainConfig


def unit(rng, k, n):
    x = rng.normal(size=(k, n))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_self_match_is_identity(rng):
    d = unit(rng, 30, 8)
    m = nn_match(d, d)
    np.testing.assert_array_equal(m.pairs, np.column_stack([np.arange(30)] * 2))
    np.testing.assert_allclose(m.distances, 0.0, atol=1e-7)


def test_mutual_check_drops_one_sided_pairs():
    q = np.array([[0.0, 0.0], [0.9, 0.0]])
    m = np.array([[1.0, 0.0]])
    # both queries pick the single map point; only the closer one is mutual
    assert nn_match(q, m, MatchOptions(mutual_check=True)).pairs.tolist() == [[1, 0]]
    assert nn_match(q, m, MatchOptions(mutual_check=False)).pairs.tolist() == [[0, 0], [1, 0]]


def test_ratio_test_arithmetic():
    q = np.array([[0.0, 0.0]])
    m = np.array([[0.5, 0.0], [0.0, 0.6]])
    assert len(nn_match(q, m, MatchOptions(ratio=0.8))) == 0
    assert len(nn_match(q, m, MatchOptions(ratio=0.85))) == 1
    with pytest.raises(ValueError):
        MatchOptions(ratio=1.5)
    with pytest.raises(ValueError):
        MatchOptions(ratio=0.0)


def test_ties_go_to_lower_index():
    q = np.array([[0.0, 0.0]])
    m = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert nn_match(q, m, MatchOptions(mutual_check=False)).pairs.tolist() == [[0, 0]]


def test_errors_and_empty(rng):
    with pytest.raises(IncompatibleDescriptorsError):
        nn_match(unit(rng, 3, 4), unit(rng, 3, 5))
    assert len(nn_match(unit(rng, 3, 4), np.zeros((0, 4)))) == 0
    assert len(nn_match(np.zeros((0, 4)), unit(rng, 3, 4))) == 0


def _brute_mutual(q, m):
    d = ((q[:, None, :] - m[None, :, :]) ** 2).sum(-1)
    fwd = {(i, int(np.argmin(d[i]))) for i in range(len(q))}
    bwd = {(int(np.argmin(d[:, j])), j) for j in range(len(m))}
    return fwd & bwd


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 300), st.integers(1, 300))
def test_mutual_pairs_equal_intersection_of_directed_maps(seed, kq, km):
    rng = np.random.default_rng(seed)
    q, m = unit(rng, kq, 6), unit(rng, km, 6)
    got = {tuple(p) for p in nn_match(q, m).pairs.tolist()}
    assert got == _brute_mutual(q, m)
    assert len({i for i, _ in got}) == len(got) == len({j for _, j in got})


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans(), st.sampled_from([None, 0.9]))
def test_common_permutation_equivariance(seed, mutual, ratio):
    rng = np.random.default_rng(seed)
    q, m = unit(rng, 40, 5), unit(rng, 35, 5)
    pq, pm = rng.permutation(40), rng.permutation(35)
    opts = MatchOptions(mutual_check=mutual, ratio=ratio)
    base = {tuple(p) for p in nn_match(q, m, opts).pairs.tolist()}
    perm = nn_match(q[pq], m[pm], opts).pairs
    mapped = {(int(pq[i]), int(pm[j])) for i, j in perm}
    assert mapped == base


def test_match_list_csv_round_trip(rng):
    ml = nn_match(unit(rng, 10, 4), unit(rng, 12, 4), MatchOptions(MatchMode.EMBEDDED, True, 0.9, False))
    ml.checksums = {"augment": "abc123"}
    text = ml.to_csv()
    assert text.splitlines()[0] == "# mode=embedded mutual_check=True ratio=0.9 augment=False"
    assert "# model augment sha256=abc123" in text
    back = MatchList.from_csv(text)
    assert back.options == ml.options
    np.testing.assert_array_equal(back.pairs, ml.pairs)
    np.testing.assert_allclose(back.distances, ml.distances, rtol=1e-8)


# pipelines

@pytest.fixture(scope="module")
def tiny_models():
    dets = [DetectorProfile("detA"), DetectorProfile("detB")]
    descs = [DescriptorProfile("descA", 16, "sift", seed=1), DescriptorProfile("descB", 24, "superpoint", seed=2)]
    ds = make_pair_dataset(6, SceneSpec(40, latent_dim=8), dets, descs, seed=0, val_fraction=0.5)
    layers = {"sift": 1, "superpoint": 1}
    hidden = {"sift": (32, 32), "superpoint": (32, 32)}
    models = ModelSet(build_branches(ds, 0, layers), build_codecs(ds, 0, 16, hidden))
    train_augment_stage(ds, models.branches, AugmentTrainConfig(epochs=2, batch_size=1, peak_lr=1e-3, warmup_steps=1))
    train_translate_stage(ds, models.codecs, TranslateTrainConfig(epochs=3, batch_size=64), branches=models.branches)
    return ds, models


def test_direct_mode_rejects_heterogeneous_descriptors(tiny_models):
    ds, models = tiny_models
    pair = ds.pairs[0]
    q, m = pair.view(0, "detA", "descA"), pair.view(1, "detA", "descB")
    for mode in (MatchMode.DIRECT, MatchMode.AUGMENT_ONLY):
        with pytest.raises(IncompatibleDescriptorsError, match="incompatible descriptor spaces"):
            match_pipeline(q, m, models.branches, models.codecs, MatchOptions(mode))


@pytest.mark.parametrize("mode", list(MatchMode))
def test_mode_echo_and_shapes(tiny_models, mode):
    ds, models = tiny_models
    pair = ds.pairs[0]
    q, m = pair.view(0, "detA", "descA"), pair.view(1, "detB", "descA")
    out = match_pipeline(q, m, models.branches, models.codecs, MatchOptions(mode))
    assert out.mode is mode and out.options.mode.value == mode.value
    assert np.all(out.distances >= 0)
    if mode is MatchMode.EMBEDDED:
        assert np.all(out.distances <= 2 + 1e-6)


def test_embedded_self_match_recovers_identity(tiny_models):
    ds, models = tiny_models
    for pair in ds.split("val"):
        for det in ("detA", "detB"):
            fs = pair.view(0, det, "descB")
            out = match_pipeline(fs, fs, models.branches, models.codecs, MatchOptions(MatchMode.EMBEDDED))
            correct = int(np.sum(out.pairs[:, 0] == out.pairs[:, 1]))
            assert correct >= 0.95 * len(fs)


def test_missing_models_are_reported(tiny_models):
    ds, models = tiny_models
    fs = ds.pairs[0].view(0, "detA", "descA")
    with pytest.raises(MissingModelError):
        match_pipeline(fs, fs, {}, models.codecs, MatchOptions(MatchMode.AUGMENT_ONLY))
    with pytest.raises(MissingModelError):
        match_pipeline(fs, fs, models.branches, {}, MatchOptions(MatchMode.EMBEDDED))
    # the baseline path never touches the branches
    out = match_pipeline(fs, fs, {}, models.codecs, MatchOptions(MatchMode.EMBEDDED, augment=False))
    assert len(out) > 0


def test_translate_mode_matches_in_map_space(tiny_models):
    ds, models = tiny_models
    pair = ds.pairs[0]
    q, m = pair.view(0, "detA", "descA"), pair.view(1, "detB", "descB")
    out = match_pipeline(q, m, models.branches, models.codecs, MatchOptions(MatchMode.TRANSLATE))
    assert len(out) > 0 and out.pairs[:, 1].max() < len(m) and out.pairs[:, 0].max() < len(q)
