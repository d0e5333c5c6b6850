"""Datasets, retrieval, resize augmentation, and batch balancing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvdiff import data as datamod
from kvdiff import evaluation, fixtures
from kvdiff.errors import EmptyRegularizationSetWarning, InvalidInput


def _sample(h=8, w=8, seed=0):
    rng = np.random.default_rng(seed)
    return datamod.ConceptExample(image=rng.uniform(-1, 1, (h, w)),
                                  caption="photo of a blob")


def test_dataset_round_trip(tmp_path):
    examples = [_sample(seed=i) for i in range(3)]
    path = str(tmp_path / "data.json")
    datamod.save_dataset(examples, path)
    loaded = datamod.load_dataset(path)
    assert len(loaded) == 3
    for a, b in zip(examples, loaded):
        assert a.caption == b.caption
        np.testing.assert_array_equal(a.image, b.image)


def test_augment_upscale():
    out = datamod.augment(_sample(), np.random.default_rng(0), ratio=1.3)
    assert out.image.shape == (8, 8)
    assert out.caption.endswith(("zoomed in", "close up"))
    np.testing.assert_array_equal(out.valid_mask, np.ones((8, 8)))


def test_augment_identity():
    s = _sample()
    out = datamod.augment(s, np.random.default_rng(0), ratio=1.0)
    np.testing.assert_array_equal(out.image, s.image)
    assert out.caption == s.caption


@given(st.floats(0.4, 0.99), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_augment_downscale_mask_marks_pasted_pixels(ratio, seed):
    s = _sample(seed=seed)
    out = datamod.augment(s, np.random.default_rng(seed), ratio=ratio,
                          canvas_value=0.123)
    pasted = out.valid_mask.astype(bool)
    # everything outside the mask is canvas, everything inside came from the image
    assert np.all(out.image[~pasted] == 0.123)
    assert pasted.sum() == max(int(round(ratio * 8)), 1) ** 2
    if ratio < 0.6:
        assert out.caption.endswith(("far away", "very small"))
    else:
        assert out.caption == s.caption


def test_augment_random_ratio_branches():
    rng = np.random.default_rng(7)
    ratios = [datamod.augment(_sample(), rng).ratio for _ in range(200)]
    assert any(r > 1.0 for r in ratios)
    assert any(r < 1.0 for r in ratios)
    assert all(0.4 <= r <= 1.4 for r in ratios)


@pytest.fixture
def pool_and_featurizer():
    vocab = fixtures.fixture_vocab()
    feat = evaluation.ReferenceFeaturizer((8, 8), text_dim=8, feature_dim=16,
                                          seed=1234)
    return fixtures.regularization_pool(), feat.caption_featurizer(vocab)


def test_retrieval_filters_and_caps(pool_and_featurizer):
    pool, featurize = pool_and_featurizer
    reg = datamod.retrieve_regularization(pool, "photo of a blob", 0.85, 200,
                                          featurize)
    assert reg.source == "retrieved"
    captions = [ex.caption for ex in reg.examples]
    # every exact-caption match survives; the least similar category is cut
    assert captions.count("photo of a blob") == 30
    assert "photo of a notch" not in captions
    # results are ordered by similarity, so a tight cap keeps exact matches
    capped = datamod.retrieve_regularization(pool, "photo of a blob", 0.85, 5,
                                             featurize)
    assert len(capped.examples) == 5
    assert all(ex.caption == "photo of a blob" for ex in capped.examples)
    with pytest.raises(InvalidInput):
        datamod.retrieve_regularization(pool, "photo of a blob", 1.5, 5, featurize)


def test_retrieval_warns_when_empty(pool_and_featurizer):
    pool, _ = pool_and_featurizer
    # orthogonal featurizer: nothing in the pool resembles the target caption
    featurize = lambda cap: (np.array([1.0, 0.0]) if cap == "photo of a griffin"
                             else np.array([0.0, 1.0]))
    with pytest.warns(EmptyRegularizationSetWarning):
        reg = datamod.retrieve_regularization(pool, "photo of a griffin",
                                              0.5, 5, featurize)
    assert reg.examples == []


def test_balanced_batches_split():
    targets = [_sample(seed=i) for i in range(2)]
    reg = datamod.RegularizationSet(examples=[_sample(seed=9)], source="retrieved")
    rng = np.random.default_rng(0)
    stream = datamod.balanced_batches(targets, reg, batch=6, rng=rng)
    batch = next(stream)
    assert len(batch) == 6
    assert sum(1 for _, is_target in batch if is_target) == 3
    # without a reg set the stream is all-target
    stream = datamod.balanced_batches(targets, None, batch=4, rng=rng)
    assert all(is_target for _, is_target in next(stream))
    with pytest.raises(InvalidInput):
        next(datamod.balanced_batches(targets, None, batch=1, rng=rng))
    with pytest.raises(InvalidInput):
        next(datamod.balanced_batches([], None, batch=4, rng=rng))
