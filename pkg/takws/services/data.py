"""
Datasets, augmentation and few-shot sampling.

Utterances are handled as precomputed feature matrices (T x n_mels).
Two sources are supported:

- a GSC-style root: one folder per keyword holding .npy feature files,
  `_background_noise_/` for noise, and the official
  `validation_list.txt` / `testing_list.txt` split lists
- a synthetic toy dataset: keyword-specific spectral templates with
  jitter, generated from a seed and optionally saved as
  `manifest.json` + `features.npz`

Every random draw comes from derive_rng(seed, *keys), so sampling and
augmentation are reproducible per (seed, record id, draw index).
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np
from scipy.signal import fftconvolve

from takws.core.errors import ConfigError, DataError
from takws.core.logging import get_logger
from takws.models.schemas import (
    NOISE_LABEL,
    AugmentationConfig,
    DataConfig,
    DatasetManifest,
    FewShotTask,
    ToyDatasetConfig,
    UtteranceRecord,
)

logger = get_logger(__name__)

GSC_SEEN = (
    "backward", "follow", "forward", "happy", "house",
    "one", "seven", "sheila", "visual", "zero",
)
GSC_UNSEEN = (
    "bed", "bird", "cat", "dog", "down", "eight", "five", "four", "go",
    "learn", "left", "marvin", "nine", "no", "off", "on", "right", "six",
    "stop", "three", "tree", "two", "up", "wow", "yes",
)
GSC_KEYWORDS = tuple(sorted(GSC_SEEN + GSC_UNSEEN))

VALID_LIST = "validation_list.txt"
TEST_LIST = "testing_list.txt"
NOISE_DIR = "_background_noise_"

MANIFEST_FILE = "manifest.json"
FEATURES_FILE = "features.npz"


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for (seed, *keys); stable across processes."""
    digest = hashlib.sha256(repr(keys).encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([seed % 2**32, *words]))


def derive_seed(seed: int, *keys) -> int:
    return int(derive_rng(seed, *keys).integers(0, 2**31 - 1))


def _stable_bucket(text: str, buckets: int) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") % buckets


# ============================================================
# FEATURE SOURCES
# ============================================================

class FeatureFrontend(Protocol):
    """Turns a record into a (T, n_mels) float32 feature matrix."""

    def load(self, record: UtteranceRecord) -> np.ndarray: ...


class NpyFrontend:
    """Precomputed features stored as one .npy file per utterance."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def load(self, record: UtteranceRecord) -> np.ndarray:
        if record.audio_path is None:
            raise DataError(f"record {record.id!r} has no feature file")
        path = self.root / record.audio_path
        try:
            features = np.load(path)
        except (OSError, ValueError) as e:
            raise DataError(f"cannot read features {path}: {e}") from e
        if features.ndim != 2 or features.shape[0] < 1:
            raise DataError(f"{path}: expected a (T, n_mels) matrix, got shape {features.shape}")
        return features.astype(np.float32, copy=False)


class InMemoryFrontend:
    def __init__(self, features: dict[str, np.ndarray]):
        self.features = features

    def load(self, record: UtteranceRecord) -> np.ndarray:
        try:
            return self.features[record.id]
        except KeyError:
            raise DataError(f"no features for record {record.id!r}") from None


@dataclass
class Corpus:
    """Manifest plus the frontend that resolves its records."""
    manifest: DatasetManifest
    frontend: FeatureFrontend
    frames: int = 64
    _by_id: dict[str, UtteranceRecord] = field(default_factory=dict, init=False, repr=False)
    _cache: dict[str, np.ndarray] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self._by_id = {r.id: r for r in self.manifest.records}

    def record(self, record_id: str) -> UtteranceRecord:
        try:
            return self._by_id[record_id]
        except KeyError:
            raise DataError(f"unknown utterance id {record_id!r}") from None

    def features(self, record_id: str) -> np.ndarray:
        """Feature matrix fitted to `frames` frames."""
        cached = self._cache.get(record_id)
        if cached is None:
            cached = fit_length(self.frontend.load(self.record(record_id)), self.frames)
            self._cache[record_id] = cached
        return cached

    @property
    def n_mels(self) -> int:
        first = self.manifest.records[0]
        return int(self.features(first.id).shape[1])


def fit_length(features: np.ndarray, frames: int) -> np.ndarray:
    """Center-crop or zero-pad (at the end) to exactly `frames` frames."""
    t = features.shape[0]
    if t == frames:
        return features.astype(np.float32, copy=False)
    if t > frames:
        start = (t - frames) // 2
        return features[start : start + frames].astype(np.float32, copy=False)
    out = np.zeros((frames, features.shape[1]), dtype=np.float32)
    out[:t] = features
    return out


# ============================================================
# GSC-STYLE LOADER
# ============================================================

def _read_split_list(path: Path) -> set[str]:
    entries = set()
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            entries.add(str(Path(line).with_suffix("")))
    return entries


def load_manifest(root_path: Union[str, Path]) -> DatasetManifest:
    """
    Ingest a GSC-style root.

    Split-list entries are matched without extension, so lists naming
    .wav files apply to the .npy features next to them.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    absent = [name for name in (VALID_LIST, TEST_LIST) if not (root / name).is_file()]
    if absent:
        raise DataError(f"dataset root {root} is missing split lists: {', '.join(absent)}")

    valid = _read_split_list(root / VALID_LIST)
    test = _read_split_list(root / TEST_LIST)
    both = sorted(valid & test)
    if both:
        raise DataError(f"{len(both)} file(s) listed in both split lists, e.g. {both[0]!r}")

    records: list[UtteranceRecord] = []
    inventory: list[str] = []
    warnings: list[str] = []
    for folder in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("_")):
        keyword = folder.name
        inventory.append(keyword)
        files = sorted(folder.glob("*.npy"))
        if not files:
            warnings.append(f"keyword folder {keyword!r} is empty")
            logger.warning("keyword_folder_empty", keyword=keyword)
        for f in files:
            rid = f"{keyword}/{f.stem}"
            split = "valid" if rid in valid else "test" if rid in test else "train"
            records.append(
                UtteranceRecord(
                    id=rid, keyword_label=keyword, split=split, audio_path=str(f.relative_to(root))
                )
            )

    noise_dir = root / NOISE_DIR
    if noise_dir.is_dir():
        for f in sorted(noise_dir.glob("*.npy")):
            rid = f"{NOISE_DIR}/{f.stem}"
            bucket = _stable_bucket(rid, 5)
            split = "train" if bucket < 3 else "valid" if bucket == 3 else "test"
            records.append(
                UtteranceRecord(
                    id=rid, keyword_label=NOISE_LABEL, split=split, audio_path=str(f.relative_to(root))
                )
            )

    seen = [k for k in inventory if k in GSC_SEEN]
    unseen = [k for k in inventory if k not in GSC_SEEN]
    manifest = DatasetManifest(
        records=records, keyword_inventory=inventory, seen=seen, unseen=unseen, warnings=warnings
    )
    logger.info(
        "manifest_loaded",
        root=str(root),
        records=len(records),
        keywords=len(inventory),
        warnings=len(warnings),
    )
    return manifest


# ============================================================
# TOY DATASET
# ============================================================

_SEGMENTS = 4
_POOL_SIZE = 12


def _bump_pool(rng: np.random.Generator, n_mels: int) -> np.ndarray:
    bins = np.arange(n_mels, dtype=np.float64)
    centers = rng.uniform(0, n_mels, _POOL_SIZE)
    widths = rng.uniform(1.5, 4.0, _POOL_SIZE)
    amps = rng.uniform(1.0, 2.0, _POOL_SIZE)
    return amps[:, None] * np.exp(-0.5 * ((bins[None, :] - centers[:, None]) / widths[:, None]) ** 2)


def _toy_utterance(template: tuple[int, ...], pool: np.ndarray, frames: int, rng) -> np.ndarray:
    edges = np.linspace(0, frames, _SEGMENTS + 1)
    jitter = rng.integers(-frames // 16, frames // 16 + 1, _SEGMENTS - 1)
    edges[1:-1] = np.clip(edges[1:-1] + jitter, 1, frames - 1)
    edges = np.sort(edges).astype(int)
    out = np.zeros((frames, pool.shape[1]))
    for seg, spectrum in enumerate(template):
        out[edges[seg] : edges[seg + 1]] = pool[spectrum] * rng.uniform(0.8, 1.2)
    out += rng.normal(0.0, 0.3, out.shape)
    return out.astype(np.float32)


def _toy_noise(n_mels: int, frames: int, rng) -> np.ndarray:
    color = rng.uniform(0.2, 1.0, n_mels)
    return (rng.normal(0.0, 1.0, (frames, n_mels)) * color).astype(np.float32)


def _split_counts(n: int) -> tuple[int, int]:
    n_train = round(0.6 * n)
    n_valid = round(0.2 * n)
    return n_train, n_valid


def make_toy_dataset(
    n_keywords: int = 8,
    n_per_keyword: int = 40,
    seed: int = 7,
    n_noise: int = 20,
    n_mels: int = 40,
    frames: int = 64,
) -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    """
    Synthetic keyword classes: every keyword is a sequence of spectral
    bumps drawn from a shared pool, rendered with time and gain jitter.
    Split 60/20/20 per keyword; the first half of keywords is 'seen'.
    """
    if n_keywords < 2:
        raise ConfigError("a toy dataset needs at least 2 keywords")
    if n_keywords > len(GSC_KEYWORDS):
        raise ConfigError(f"a toy dataset supports at most {len(GSC_KEYWORDS)} keywords")
    if n_per_keyword < 5:
        raise ConfigError("a toy dataset needs at least 5 utterances per keyword")

    rng = derive_rng(seed, "toy-templates")
    pool = _bump_pool(rng, n_mels)
    keywords = list(GSC_KEYWORDS[:n_keywords])
    templates: dict[str, tuple[int, ...]] = {}
    used: set[tuple[int, ...]] = set()
    for keyword in keywords:
        while True:
            template = tuple(int(i) for i in rng.choice(_POOL_SIZE, _SEGMENTS, replace=False))
            if template not in used:
                break
        used.add(template)
        templates[keyword] = template

    records: list[UtteranceRecord] = []
    features: dict[str, np.ndarray] = {}
    n_train, n_valid = _split_counts(n_per_keyword)
    for k, keyword in enumerate(keywords):
        order = derive_rng(seed, "toy-split", keyword).permutation(n_per_keyword)
        for j in range(n_per_keyword):
            rid = f"{keyword}/{j:04d}"
            rank = int(np.where(order == j)[0][0])
            split = "train" if rank < n_train else "valid" if rank < n_train + n_valid else "test"
            features[rid] = _toy_utterance(
                templates[keyword], pool, frames, derive_rng(seed, "toy-utt", rid)
            )
            records.append(
                UtteranceRecord(
                    id=rid,
                    keyword_label=keyword,
                    split=split,
                    synthetic={"keyword_index": k, "utterance": j},
                )
            )

    n_train, n_valid = _split_counts(n_noise)
    for j in range(n_noise):
        rid = f"{NOISE_LABEL}/{j:04d}"
        split = "train" if j < n_train else "valid" if j < n_train + n_valid else "test"
        features[rid] = _toy_noise(n_mels, frames, derive_rng(seed, "toy-noise", rid))
        records.append(
            UtteranceRecord(id=rid, keyword_label=NOISE_LABEL, split=split, synthetic={"utterance": j})
        )

    half = n_keywords // 2
    manifest = DatasetManifest(
        records=records,
        keyword_inventory=keywords,
        seen=keywords[:half],
        unseen=keywords[half:],
    )
    logger.info("toy_dataset_generated", keywords=n_keywords, records=len(records), seed=seed)
    return manifest, features


def save_toy_dataset(manifest: DatasetManifest, features: dict[str, np.ndarray], out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2) + "\n")
    np.savez(out / FEATURES_FILE, **{f"u{i}": features[r.id] for i, r in enumerate(manifest.records)})
    logger.info("toy_dataset_saved", path=str(out), records=len(manifest.records))
    return out


def load_toy_dataset(path: Union[str, Path]) -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        manifest = DatasetManifest.model_validate_json((path / MANIFEST_FILE).read_text())
        with np.load(path / FEATURES_FILE) as npz:
            features = {r.id: npz[f"u{i}"] for i, r in enumerate(manifest.records)}
    except (OSError, KeyError) as e:
        raise DataError(f"cannot read toy dataset at {path}: {e}") from e
    return manifest, features


def open_corpus(config: DataConfig) -> Corpus:
    """Resolve a data section: saved toy dataset, GSC-style root, or in-memory toy."""
    if config.toy is not None:
        toy: ToyDatasetConfig = config.toy
        manifest, features = make_toy_dataset(
            toy.n_keywords, toy.n_per_keyword, toy.seed, toy.n_noise, toy.n_mels, toy.frames
        )
        return Corpus(manifest, InMemoryFrontend(features), frames=config.frames)
    path = Path(config.path)
    if not path.exists():
        raise ConfigError(f"data.path: {path} does not exist")
    if (path / MANIFEST_FILE).is_file():
        manifest, features = load_toy_dataset(path)
        return Corpus(manifest, InMemoryFrontend(features), frames=config.frames)
    return Corpus(load_manifest(path), NpyFrontend(path), frames=config.frames)


# ============================================================
# AUGMENTATION
# ============================================================

def draw_snr(config: AugmentationConfig, rng: np.random.Generator) -> float:
    low, high = config.snr_db_range
    return float(rng.uniform(low, high))


def mix_at_snr(features: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """
    Add noise scaled so mean(features^2) / mean(scaled_noise^2) = 10^(snr/10).

    Noise is tiled or cropped to the signal length. Silent noise leaves
    the signal unchanged.
    """
    t = features.shape[0]
    if noise.shape[0] < t:
        noise = np.tile(noise, (int(np.ceil(t / noise.shape[0])), 1))
    noise = noise[:t]
    p_signal = float(np.mean(features.astype(np.float64) ** 2))
    p_noise = float(np.mean(noise.astype(np.float64) ** 2))
    if p_noise == 0.0:
        return features
    scale = np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    return (features + scale * noise).astype(features.dtype)


def synthetic_rirs(config: AugmentationConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Exponential-decay filters with a unit direct path and randomized decay."""
    taps = np.arange(config.rir_length, dtype=np.float64)
    rirs = []
    for _ in range(config.n_synthetic_rirs):
        decay = rng.uniform(*config.rir_decay_range)
        h = np.exp(-taps / decay) * rng.uniform(0.0, 1.0, config.rir_length)
        h[0] = 1.0
        rirs.append(h / h.sum())
    return rirs


def apply_rir(features: np.ndarray, rir: np.ndarray) -> np.ndarray:
    """Convolve every feature bin with the filter along time, keeping length."""
    out = fftconvolve(features, rir[:, None], mode="full", axes=0)[: features.shape[0]]
    return out.astype(features.dtype)


def augment(
    features: np.ndarray,
    config: AugmentationConfig,
    rng: np.random.Generator,
    noise_pool: Sequence[np.ndarray] = (),
    rir_pool: Sequence[np.ndarray] = (),
) -> np.ndarray:
    """
    Reverberate and/or add noise.

    joint mode applies the RIR then the noise; independent mode applies
    exactly one of the enabled operations per call.
    """
    if not config.enabled:
        return features
    use_noise = config.noise
    use_reverb = config.reverb and len(rir_pool) > 0
    if use_noise and len(noise_pool) == 0:
        raise ConfigError("noise augmentation is enabled but the noise pool is empty")

    ops = [op for op, on in (("reverb", use_reverb), ("noise", use_noise)) if on]
    if config.mode == "independent" and ops:
        ops = [ops[int(rng.integers(len(ops)))]]

    out = features
    if "reverb" in ops:
        out = apply_rir(out, rir_pool[int(rng.integers(len(rir_pool)))])
    if "noise" in ops:
        noise = noise_pool[int(rng.integers(len(noise_pool)))]
        offset = int(rng.integers(max(1, noise.shape[0] - out.shape[0] + 1)))
        out = mix_at_snr(out, noise[offset:], draw_snr(config, rng))
    return out


@dataclass
class Augmenter:
    """Augmentation bound to its noise and RIR pools."""
    config: AugmentationConfig
    noise_pool: list[np.ndarray]
    rir_pool: list[np.ndarray]

    @classmethod
    def for_corpus(cls, corpus: Corpus, config: AugmentationConfig, seed: int) -> "Augmenter":
        """Noise from the training noise recordings; synthetic RIRs from the seed."""
        noise = [corpus.features(r.id) for r in corpus.manifest.by_split("train") if r.is_noise]
        if config.noise and not noise:
            logger.warning("augmentation_noise_unavailable", reason="no training noise records")
            config = config.model_copy(update={"noise": False})
        rirs = synthetic_rirs(config, derive_rng(seed, "rirs")) if config.reverb else []
        return cls(config=config, noise_pool=noise, rir_pool=rirs)

    def __call__(self, features: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return augment(features, self.config, rng, self.noise_pool, self.rir_pool)


def expand(
    corpus: Corpus,
    record_ids: Sequence[str],
    augmenter: Augmenter,
    seed: int,
    factor: Optional[int] = None,
) -> tuple[np.ndarray, list[str]]:
    """
    Evaluation set of `factor` augmented copies per record.

    Returns (N * factor, T, n_mels) features and the matching ids; copy
    c of record r is drawn from derive_rng(seed, r, c).
    """
    factor = factor or augmenter.config.expansion_factor
    out, ids = [], []
    for rid in record_ids:
        clean = corpus.features(rid)
        for copy in range(factor):
            out.append(augmenter(clean, derive_rng(seed, "expand", rid, copy)))
            ids.append(rid)
    if not out:
        raise DataError("evaluation set is empty")
    return np.stack(out).astype(np.float32), ids


# ============================================================
# FEW-SHOT SAMPLING
# ============================================================

def sample_few_shot(manifest: DatasetManifest, keyword: str, shots: int, sampling_seed: int) -> FewShotTask:
    """Draw `shots` training utterances of the keyword; pools come from the other training records."""
    if keyword not in manifest.keyword_inventory:
        raise DataError(f"keyword {keyword!r} is not in the dataset inventory")
    train = manifest.by_split("train")
    pool = sorted(r.id for r in train if r.keyword_label == keyword)
    if len(pool) < shots:
        raise DataError(f"keyword {keyword!r} has {len(pool)} training utterances, {shots} shots requested")
    rng = derive_rng(sampling_seed, "few-shot", keyword, shots)
    chosen = [pool[i] for i in rng.choice(len(pool), size=shots, replace=False)]
    return FewShotTask(
        keyword=keyword,
        shots=shots,
        sampling_seed=sampling_seed,
        train_ids=chosen,
        nontarget_pool=sorted(r.id for r in train if not r.is_noise and r.keyword_label != keyword),
        noise_pool=sorted(r.id for r in train if r.is_noise),
        valid_ids=sorted(r.id for r in manifest.by_split("valid")),
        test_ids=sorted(r.id for r in manifest.by_split("test")),
    )
