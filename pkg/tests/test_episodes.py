import numpy as np
import pytest

from protoseg.data import (LabeledSample, SupportSet, remap_episode_labels, restore_labels,
                           sample_episode)
from protoseg.data.samples import IGNORE_LABEL
from protoseg.errors import EmptySupportError, EpisodeSamplingError

from conftest import random_sample


def mask_of(values, size=(6, 6), rng=None):
    rng = rng or np.random.default_rng(0)
    return rng.choice(np.asarray(values, dtype=np.uint8), size=size)


def test_paper_example_classes_1_and_7():
    support = mask_of([1, 7])
    query = mask_of([1, 7, 3, IGNORE_LABEL])
    sup, qry, class_set = remap_episode_labels(support, query)
    assert class_set == [1, 7]
    np.testing.assert_array_equal(sup[support == 1], 0)
    np.testing.assert_array_equal(sup[support == 7], 1)
    np.testing.assert_array_equal(qry[query == 1], 0)
    np.testing.assert_array_equal(qry[query == 7], 1)
    np.testing.assert_array_equal(qry[query == 3], IGNORE_LABEL)
    np.testing.assert_array_equal(qry[query == IGNORE_LABEL], IGNORE_LABEL)


def test_single_class_identity():
    support = np.zeros((5, 5), dtype=np.uint8)
    query = np.zeros((5, 5), dtype=np.uint8)
    sup, qry, class_set = remap_episode_labels(support, query)
    assert class_set == [0]
    np.testing.assert_array_equal(sup, support)
    np.testing.assert_array_equal(qry, query)


def test_partial_overlap_and_round_trip():
    rng = np.random.default_rng(5)
    support = mask_of([2, 5, 9], rng=rng)
    query = mask_of([0, 5, 9, 11], rng=rng)
    sup, qry, class_set = remap_episode_labels(support, query)
    assert class_set == [2, 5, 9]
    np.testing.assert_array_equal(qry[query == 5], 1)
    np.testing.assert_array_equal(qry[query == 9], 2)
    np.testing.assert_array_equal(qry[np.isin(query, [0, 11])], IGNORE_LABEL)
    # inverse map restores originals on all non-ignored pixels
    restored_sup = restore_labels(sup, class_set)
    np.testing.assert_array_equal(restored_sup, support)
    restored_qry = restore_labels(qry, class_set)
    keep = qry != IGNORE_LABEL
    np.testing.assert_array_equal(restored_qry[keep], query[keep])


def test_remap_properties_random_pairs():
    rng = np.random.default_rng(77)
    for _ in range(200):
        n_class = int(rng.integers(2, 12))
        support = rng.integers(0, n_class, size=(7, 7)).astype(np.uint8)
        support[rng.random((7, 7)) < 0.2] = IGNORE_LABEL
        query = rng.integers(0, n_class, size=(7, 7)).astype(np.uint8)
        query[rng.random((7, 7)) < 0.2] = IGNORE_LABEL
        if np.all(support == IGNORE_LABEL):
            with pytest.raises(EmptySupportError):
                remap_episode_labels(support, query)
            continue
        sup, qry, class_set = remap_episode_labels(support, query)
        n_way = len(class_set)
        assert sorted(class_set) == class_set and IGNORE_LABEL not in class_set
        for arr in (sup, qry):
            values = set(np.unique(arr).tolist())
            assert values <= set(range(n_way)) | {IGNORE_LABEL}
        outside = ~np.isin(query, class_set)
        np.testing.assert_array_equal(qry[outside], IGNORE_LABEL)


def test_empty_support_raises():
    with pytest.raises(EmptySupportError):
        remap_episode_labels(np.full((3, 3), IGNORE_LABEL, np.uint8),
                             np.zeros((3, 3), np.uint8))


def _support_set(rng, n=4, n_class=6, size=(24, 24)):
    samples = [random_sample(rng, size=size, n_class=n_class, name=f"sup_{i}")
               for i in range(n)]
    return SupportSet(samples=samples, k_shot=1, n_class=n_class,
                      occurrence=np.ones(n_class, dtype=np.int64))


def test_single_support_forced_choice(rng):
    support = _support_set(rng, n=1)
    queries = [random_sample(rng, name=f"q{i}") for i in range(3)]
    episode = sample_episode(queries, support, np.random.default_rng(0), crop_size=(16, 16))
    assert episode.support.name == "sup_0"
    assert episode.n_way == len(episode.class_set)


def test_episode_stream_deterministic(rng):
    support = _support_set(rng)
    queries = [random_sample(rng, name=f"q{i}") for i in range(5)]
    streams = []
    for _ in range(2):
        gen = np.random.default_rng(42)
        episodes = [sample_episode(queries, support, gen, crop_size=(16, 16))
                    for _ in range(10)]
        streams.append(episodes)
    for e1, e2 in zip(*streams):
        assert e1.class_set == e2.class_set
        np.testing.assert_array_equal(e1.support.image, e2.support.image)
        np.testing.assert_array_equal(e1.support.mask, e2.support.mask)
        np.testing.assert_array_equal(e1.query.image, e2.query.image)
        np.testing.assert_array_equal(e1.query.mask, e2.query.mask)


def test_support_selection_uniform(rng):
    n_support = 33
    support = _support_set(rng, n=n_support, size=(16, 16))
    queries = [random_sample(rng, size=(16, 16), name="q")]
    gen = np.random.default_rng(7)
    counts = np.zeros(n_support)
    n_draws = 1000
    for _ in range(n_draws):
        episode = sample_episode(queries, support, gen, crop_size=(12, 12), query_index=0)
        counts[int(episode.support.name.split("_")[1])] += 1
    expected = n_draws / n_support
    sigma = np.sqrt(n_draws * (1 / n_support) * (1 - 1 / n_support))
    assert np.all(np.abs(counts - expected) < 3 * sigma + 1e-9)


def test_degenerate_support_retries_exhausted(rng):
    bad = LabeledSample(np.zeros((8, 8, 3), np.float32),
                        np.full((8, 8), IGNORE_LABEL, np.uint8), "bad")
    support = SupportSet(samples=[bad], k_shot=1, n_class=3,
                         occurrence=np.zeros(3, dtype=np.int64))
    queries = [random_sample(rng, size=(8, 8), name="q")]
    with pytest.raises(EpisodeSamplingError):
        sample_episode(queries, support, np.random.default_rng(0), crop_size=(8, 8),
                       max_retries=5)
