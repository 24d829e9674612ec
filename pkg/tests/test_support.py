import numpy as np
import pytest

from protoseg.data import LabeledSample, construct_support_set, load_support_set, save_support_set, write_dataset
from protoseg.data.samples import IGNORE_LABEL

from conftest import random_sample


def oracle_support_pass(masks, order, k_shot, n_class):
    """Straight-line reimplementation of the occurrence-accumulation pass."""
    occur = [0] * n_class
    admitted = []
    for i in order:
        labels = set(int(v) for v in np.unique(masks[i]) if v != IGNORE_LABEL)
        added = False
        for c in range(n_class):
            if occur[c] < k_shot and c in labels:
                occur[c] += 1
                if not added:
                    admitted.append(i)
                    added = True
    return admitted, occur


def make_dataset(rng, n_images, n_class, size=(16, 16)):
    return [random_sample(rng, size=size, n_class=n_class, p_ignore=0.05, name=f"img_{i}")
            for i in range(n_images)]


def test_replay_matches_oracle(rng):
    for trial in range(10):
        n_class = int(rng.integers(3, 9))
        dataset = make_dataset(rng, int(rng.integers(10, 50)), n_class)
        k_shot = int(rng.integers(1, 5))
        seed = int(rng.integers(0, 10_000))
        support = construct_support_set(dataset, k_shot, n_class, seed=seed)
        order = np.random.default_rng(seed).permutation(len(dataset))
        expected_idx, expected_occ = oracle_support_pass(
            [s.mask for s in dataset], order, k_shot, n_class)
        assert [s.name for s in support.samples] == [dataset[i].name for i in expected_idx]
        assert support.occurrence.tolist() == expected_occ


def test_first_image_saturates_small_case():
    masks = []
    for _ in range(3):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[2:] = 1
        masks.append(mask)
    dataset = [LabeledSample(np.zeros((4, 4, 3), np.float32), m, f"i{j}")
               for j, m in enumerate(masks)]
    support = construct_support_set(dataset, k_shot=1, n_class=5, seed=0)
    assert len(support) == 1
    assert support.occurrence.tolist() == [1, 1, 0, 0, 0]
    assert support.unsaturated_classes() == [2, 3, 4]


def test_monotone_in_k_shot(rng):
    dataset = make_dataset(rng, 40, 6)
    names_prev = None
    for k_shot in (1, 2, 3, 5):
        support = construct_support_set(dataset, k_shot, 6, seed=11)
        names = [s.name for s in support.samples]
        if names_prev is not None:
            assert set(names_prev) <= set(names)
        names_prev = names


def test_occurrence_equals_min_of_kshot_and_available(rng):
    dataset = make_dataset(rng, 25, 7)
    k_shot = 4
    support = construct_support_set(dataset, k_shot, 7, seed=3)
    for c in range(7):
        available = sum(c in np.unique(s.mask) for s in dataset)
        assert support.occurrence[c] == min(k_shot, available)


def test_errors():
    with pytest.raises(ValueError):
        construct_support_set([], 1, 3, seed=0)
    sample = LabeledSample(np.zeros((4, 4, 3), np.float32),
                           np.full((4, 4), IGNORE_LABEL, np.uint8), "empty")
    with pytest.raises(ValueError):
        construct_support_set([sample], 1, 3, seed=0)
    ok = LabeledSample(np.zeros((4, 4, 3), np.float32), np.zeros((4, 4), np.uint8), "ok")
    with pytest.raises(ValueError):
        construct_support_set([ok], 0, 3, seed=0)
    with pytest.raises(ValueError):
        construct_support_set([ok], 1, 0, seed=0)


def test_persistence_round_trip(tmp_path, rng):
    from protoseg.data import load_dataset

    dataset = make_dataset(rng, 12, 5)
    manifest = write_dataset(tmp_path / "ds", dataset, n_class=5)
    loaded_ds, _ = load_dataset(manifest)
    support = construct_support_set(loaded_ds, 2, 5, seed=9)
    path = save_support_set(tmp_path / "sup" / "support.json", support, manifest)
    back = load_support_set(path)
    assert back.k_shot == support.k_shot
    assert back.n_class == support.n_class
    assert back.occurrence.tolist() == support.occurrence.tolist()
    assert [s.name for s in back.samples] == [s.name for s in support.samples]
    for a, b in zip(back.samples, support.samples):
        np.testing.assert_array_equal(a.mask, b.mask)
