"""
Tests for dataset ingestion, toy data, augmentation and few-shot sampling.
"""

import numpy as np
import pytest
from scipy.stats import kstest

from takws.core.errors import ConfigError, DataError
from takws.models.schemas import AugmentationConfig, BatchComposition, DataConfig, ToyDatasetConfig
from takws.services.data import (
    NOISE_DIR,
    Augmenter,
    Corpus,
    InMemoryFrontend,
    apply_rir,
    augment,
    derive_rng,
    draw_snr,
    expand,
    fit_length,
    load_manifest,
    load_toy_dataset,
    make_toy_dataset,
    mix_at_snr,
    open_corpus,
    sample_few_shot,
    save_toy_dataset,
)


# ============================================================
# TOY DATA
# ============================================================

def test_toy_dataset_is_deterministic():
    """Verify the same seed reproduces the same records and features."""
    m1, f1 = make_toy_dataset(n_keywords=3, n_per_keyword=10, seed=11, n_noise=5, n_mels=6, frames=16)
    m2, f2 = make_toy_dataset(n_keywords=3, n_per_keyword=10, seed=11, n_noise=5, n_mels=6, frames=16)
    _, f3 = make_toy_dataset(n_keywords=3, n_per_keyword=10, seed=12, n_noise=5, n_mels=6, frames=16)

    assert m1 == m2
    assert all(np.array_equal(f1[k], f2[k]) for k in f1)
    assert not all(np.array_equal(f1[k], f3[k]) for k in f1)


def test_toy_dataset_layout(toy_data):
    """Verify 60/20/20 splits, id format and the seen/unseen halves."""
    manifest, features = toy_data

    assert manifest.keyword_inventory == ["backward", "bed", "bird", "cat"]
    assert manifest.seen == ["backward", "bed"]
    for keyword in manifest.keyword_inventory:
        splits = [r.split for r in manifest.records if r.keyword_label == keyword]
        assert (splits.count("train"), splits.count("valid"), splits.count("test")) == (18, 6, 6)
    noise = [r for r in manifest.records if r.is_noise]
    assert [r.split for r in noise].count("train") == 6
    assert noise[0].id == "_noise_/0000"
    assert features["cat/0003"].shape == (32, 12)


def test_toy_keywords_are_separable(toy_data):
    """Verify utterances sit closer to their own keyword than to the other keywords, on average."""
    manifest, features = toy_data
    by_keyword = {
        k: np.stack([features[r.id].ravel() for r in manifest.records if r.keyword_label == k])
        for k in manifest.keyword_inventory
    }

    def mean_distance(a, b):
        return float(np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1).mean())

    for keyword, own in by_keyword.items():
        n = len(own)
        within = mean_distance(own, own) * n / (n - 1)
        others = np.concatenate([v for k, v in by_keyword.items() if k != keyword])
        assert within < mean_distance(own, others)


def test_toy_dataset_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        make_toy_dataset(n_keywords=1)
    with pytest.raises(ConfigError):
        make_toy_dataset(n_keywords=36)
    with pytest.raises(ConfigError):
        make_toy_dataset(n_per_keyword=4)


def test_toy_dataset_persistence(tmp_path):
    manifest, features = make_toy_dataset(n_keywords=2, n_per_keyword=5, n_noise=5, n_mels=4, frames=8)
    save_toy_dataset(manifest, features, tmp_path / "toy")
    loaded, loaded_features = load_toy_dataset(tmp_path / "toy")

    assert loaded == manifest
    assert all(np.array_equal(features[k], loaded_features[k]) for k in features)

    corpus = open_corpus(DataConfig(path=str(tmp_path / "toy"), frames=8))
    assert corpus.n_mels == 4


def test_open_corpus_errors(tmp_path):
    with pytest.raises(ConfigError, match="data.path"):
        open_corpus(DataConfig(path=str(tmp_path / "missing")))
    corpus = open_corpus(DataConfig(toy=ToyDatasetConfig(n_keywords=2, n_per_keyword=5, n_noise=5), frames=20))
    assert corpus.features("backward/0000").shape == (20, 40)
    with pytest.raises(DataError):
        corpus.record("nope/0000")


def test_fit_length_crops_and_pads():
    x = np.arange(10 * 2, dtype=np.float32).reshape(10, 2)

    assert np.array_equal(fit_length(x, 4), x[3:7])
    padded = fit_length(x, 12)
    assert np.array_equal(padded[:10], x)
    assert not padded[10:].any()


# ============================================================
# GSC-STYLE ROOT
# ============================================================

def _gsc_root(tmp_path, valid=("yes/a",), test=("no/b",)):
    root = tmp_path / "gsc"
    for folder, names in (("yes", "ab"), ("no", "ab"), ("up", ""), (NOISE_DIR, "xyz")):
        (root / folder).mkdir(parents=True)
        for name in names:
            np.save(root / folder / f"{name}.npy", np.ones((10, 4), dtype=np.float32))
    (root / "validation_list.txt").write_text("".join(f"{v}.wav\n" for v in valid))
    (root / "testing_list.txt").write_text("".join(f"{t}.wav\n" for t in test))
    return root


def test_gsc_manifest(tmp_path):
    """Verify split lists, keyword folders, empty-folder warnings and seen/unseen."""
    manifest = load_manifest(_gsc_root(tmp_path))
    splits = {r.id: r.split for r in manifest.records}

    assert manifest.keyword_inventory == ["no", "up", "yes"]
    assert (splits["yes/a"], splits["no/b"], splits["yes/b"]) == ("valid", "test", "train")
    assert any("'up'" in w for w in manifest.warnings)
    assert sum(r.is_noise for r in manifest.records) == 3
    assert set(manifest.seen) | set(manifest.unseen) == {"no", "up", "yes"}


def test_gsc_manifest_errors(tmp_path):
    """Verify missing split lists and overlapping lists are data errors."""
    root = _gsc_root(tmp_path, valid=("yes/a",), test=("yes/a",))
    with pytest.raises(DataError, match="both"):
        load_manifest(root)

    (root / "testing_list.txt").unlink()
    with pytest.raises(DataError, match="testing_list.txt"):
        load_manifest(root)


# ============================================================
# AUGMENTATION
# ============================================================

def test_mix_at_snr_hits_requested_ratio():
    """Verify the feature-domain power ratio equals the requested SNR."""
    rng = np.random.default_rng(0)
    signal = rng.normal(size=(50, 8))
    noise = rng.normal(size=(20, 8)) * 3.0

    for snr in (5.0, 12.5, 25.0):
        mixed = mix_at_snr(signal, noise, snr)
        added = mixed - signal
        measured = 10 * np.log10(np.mean(signal**2) / np.mean(added**2))
        assert measured == pytest.approx(snr, abs=1e-9)

    assert np.array_equal(mix_at_snr(signal, np.zeros((5, 8)), 10.0), signal)


def test_snr_draws_are_uniform():
    config = AugmentationConfig()
    rng = np.random.default_rng(3)
    draws = [draw_snr(config, rng) for _ in range(2000)]

    assert min(draws) >= 5.0 and max(draws) <= 25.0
    assert kstest(draws, "uniform", args=(5.0, 20.0)).pvalue > 1e-3


def test_rir_keeps_length():
    x = np.random.default_rng(1).normal(size=(30, 5)).astype(np.float32)
    out = apply_rir(x, np.array([1.0, 0.0, 0.0]))

    assert out.shape == x.shape
    assert np.allclose(out, x, atol=1e-5)


def test_augment_guards():
    x = np.ones((10, 3), dtype=np.float32)
    rng = np.random.default_rng(0)

    assert augment(x, AugmentationConfig(enabled=False), rng) is x
    with pytest.raises(ConfigError):
        augment(x, AugmentationConfig(reverb=False), rng, noise_pool=[])


def test_independent_mode_applies_one_operation():
    """Verify independent mode picks one operation per call; joint mode applies both."""
    x = np.random.default_rng(0).normal(size=(16, 3))
    noise = [np.random.default_rng(1).normal(size=(16, 3))]
    rir = [np.array([0.5, 0.5])]
    reverbed = apply_rir(x, rir[0])

    independent = AugmentationConfig(mode="independent")
    reverb_only = [np.array_equal(augment(x, independent, derive_rng(s), noise, rir), reverbed) for s in range(20)]
    assert 0 < sum(reverb_only) < 20

    joint = augment(x, AugmentationConfig(), derive_rng(0), noise, rir)
    assert not np.allclose(joint, reverbed)


def test_augmenter_without_noise_records():
    """Verify noise augmentation switches off when the corpus has no training noise."""
    manifest, features = make_toy_dataset(n_keywords=2, n_per_keyword=5, n_noise=5)
    stripped = manifest.model_copy(update={"records": [r for r in manifest.records if not r.is_noise]})
    augmenter = Augmenter.for_corpus(Corpus(stripped, InMemoryFrontend(features)), AugmentationConfig(), seed=0)
    assert augmenter.config.noise is False


def test_expand_is_reproducible(toy_corpus):
    """Verify expand gives factor copies per record with seed-determined content."""
    augmenter = Augmenter.for_corpus(toy_corpus, AugmentationConfig(), seed=0)
    ids = ["cat/0000", "bed/0001"]
    a, a_ids = expand(toy_corpus, ids, augmenter, seed=4)
    b, _ = expand(toy_corpus, ids, augmenter, seed=4)

    assert a.shape == (8, 32, 12)
    assert a_ids == ["cat/0000"] * 4 + ["bed/0001"] * 4
    assert np.array_equal(a, b)
    with pytest.raises(DataError):
        expand(toy_corpus, [], augmenter, seed=4)


# ============================================================
# FEW-SHOT SAMPLING
# ============================================================

def test_sample_few_shot(toy_data):
    """Verify shots come from the keyword's training split and sampling is seeded."""
    manifest, _ = toy_data
    task = sample_few_shot(manifest, "cat", 15, sampling_seed=3)
    again = sample_few_shot(manifest, "cat", 15, sampling_seed=3)
    other = sample_few_shot(manifest, "cat", 15, sampling_seed=4)

    by_id = {r.id: r for r in manifest.records}
    assert task == again
    assert task.train_ids != other.train_ids
    assert len(set(task.train_ids)) == 15
    assert all(by_id[i].keyword_label == "cat" and by_id[i].split == "train" for i in task.train_ids)
    assert all(by_id[i].keyword_label != "cat" and not by_id[i].is_noise for i in task.nontarget_pool)
    assert all(by_id[i].is_noise for i in task.noise_pool)
    assert len(task.test_ids) == 4 * 6 + 2


def test_sample_few_shot_errors(toy_data):
    manifest, _ = toy_data
    with pytest.raises(DataError):
        sample_few_shot(manifest, "sheila", 5, sampling_seed=0)

    small, _ = make_toy_dataset(n_keywords=2, n_per_keyword=10)
    with pytest.raises(DataError):
        sample_few_shot(small, "bed", 10, sampling_seed=0)


@pytest.mark.parametrize(
    "total, expected",
    [(256, (128, 96, 32)), (64, (32, 24, 8)), (16, (8, 6, 2)), (10, (5, 4, 1))],
)
def test_scaled_composition_keeps_ratio(total, expected):
    comp = BatchComposition.scaled(total)

    assert (comp.n_target, comp.n_nontarget, comp.n_noise) == expected
    assert comp.total == total
