"""
Few-shot adaptation, evaluation and toy pre-training.

An adaptation run owns a private copy of the pre-trained encoder: the
ModelPair it starts from is never mutated. Every epoch is a fixed
number of composed batches (target / non-target / noise); after each
epoch the detector is scored on the augmented validation set and the
state with the best validation AP (earliest on ties) is returned.
"""

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim import AdamW
from torch.optim.lr_scheduler import StepLR
from tqdm import tqdm

from takws.core.config import get_settings
from takws.core.errors import (
    DataError,
    DivergenceError,
    FrozenParameterError,
    PretrainingError,
    UndefinedMetricError,
)
from takws.core.logging import get_logger
from takws.models.schemas import (
    AdapterSpec,
    AugmentationConfig,
    BatchComposition,
    FewShotTask,
    MethodKind,
    MetricsReport,
    OptimizerConfig,
    PretrainConfig,
    ScoreSet,
    TrainLogEntry,
    UtteranceClass,
)
from takws.networks.conditioning import LAF_RELU_LOGIT
from takws.networks.detector import HeadKind, KeywordDetector, ModelPair
from takws.networks.encoder import build_encoder
from takws.networks.text_encoder import build_text_encoder, freeze
from takws.services.adaptation import (
    ParamSnapshot,
    TrainablePlan,
    restore,
    select_trainable,
    snapshot,
)
from takws.services.data import Augmenter, Corpus, derive_rng, derive_seed, expand
from takws.services.scoring import compute_ap, evaluate_score_set

logger = get_logger(__name__)


def lr_at_epoch(opt: OptimizerConfig, epoch: int) -> float:
    """lr0 * 2^(-floor(epoch / period)), the StepLR(gamma=0.5) schedule."""
    return opt.lr * 0.5 ** (epoch // opt.lr_halving_period_epochs)


# ============================================================
# BATCHES
# ============================================================

@dataclass
class Batch:
    features: np.ndarray   # (B, T, n_mels) float32
    classes: np.ndarray    # (B,) UtteranceClass values
    ids: list[str] = field(default_factory=list)

    def counts(self) -> tuple[int, int, int]:
        return (
            int(np.sum(self.classes == UtteranceClass.TARGET)),
            int(np.sum(self.classes == UtteranceClass.NON_TARGET)),
            int(np.sum(self.classes == UtteranceClass.NOISE)),
        )


def compose_batch(
    task: FewShotTask,
    comp: BatchComposition,
    rng: np.random.Generator,
    corpus: Corpus,
    augmenter: Optional[Augmenter] = None,
) -> Batch:
    """
    Targets are the few-shot positives resampled with replacement;
    targets and non-targets are augmented, noise clips are not.
    """
    if not task.train_ids:
        raise DataError(f"task for {task.keyword!r} has no positive utterances")
    if comp.n_nontarget and not task.nontarget_pool:
        raise DataError(f"non-target pool for {task.keyword!r} is empty")
    if comp.n_noise and not task.noise_pool:
        raise DataError(f"noise pool for {task.keyword!r} is empty")

    draws = [
        (UtteranceClass.TARGET, task.train_ids, comp.n_target, True),
        (UtteranceClass.NON_TARGET, task.nontarget_pool, comp.n_nontarget, True),
        (UtteranceClass.NOISE, task.noise_pool, comp.n_noise, False),
    ]
    features, classes, ids = [], [], []
    for label, pool, n, augmented in draws:
        for index in rng.integers(0, len(pool), size=n) if n else []:
            rid = pool[int(index)]
            x = corpus.features(rid)
            if augmented and augmenter is not None:
                x = augmenter(x, rng)
            features.append(x)
            classes.append(int(label))
            ids.append(rid)
    return Batch(np.stack(features).astype(np.float32), np.array(classes, dtype=np.int64), ids)


# ============================================================
# DETECTORS
# ============================================================

def build_detector(
    pair: ModelPair,
    keyword: str,
    method: MethodKind,
    spec: Optional[AdapterSpec] = None,
    head_init: str = "te",
    seed: int = 0,
    relu_logit: float = LAF_RELU_LOGIT,
) -> KeywordDetector:
    """
    Detector on a private copy of the pre-trained encoder, with sites
    installed per spec. Sites start near ReLU (relu_logit, see laf_init).
    """
    spec = spec or method.spec
    encoder = copy.deepcopy(pair.encoder)
    encoder.clear_activation_sites()
    if spec.tcfm_sites:
        encoder.set_activation_sites(spec.tcfm_sites, relu_logit=relu_logit)
    generator = torch.Generator().manual_seed(derive_seed(seed, "head", keyword))
    return KeywordDetector(
        encoder,
        pair.te(keyword),
        head=HeadKind(method.head),
        head_init=head_init,
        use_kam=method.uses_kam,
        generator=generator,
    )


def score_features(detector: KeywordDetector, features: np.ndarray, mode: str = "probability") -> np.ndarray:
    """Detection scores in evaluation mode, batched by settings.eval_batch_size."""
    settings = get_settings()
    was_training = {name: m.training for name, m in detector.named_modules()}
    detector.eval()
    device = detector.te.device
    out = []
    try:
        with torch.no_grad():
            for start in range(0, len(features), settings.eval_batch_size):
                x = torch.from_numpy(features[start : start + settings.eval_batch_size]).to(
                    device, detector.te.dtype
                )
                if mode == "cosine" and detector.head_kind is HeadKind.TE:
                    out.append(detector(x))
                else:
                    out.append(detector.detection_score(x))
    finally:
        for name, m in detector.named_modules():
            m.training = was_training[name]
    return torch.cat(out).cpu().double().numpy()


@dataclass
class EvalSet:
    """Expanded (augmented) evaluation utterances with their labels."""
    features: np.ndarray
    ids: list[str]
    labels: np.ndarray

    @classmethod
    def build(cls, corpus: Corpus, record_ids: list[str], keyword: str, augmenter: Augmenter, seed: int) -> "EvalSet":
        features, ids = expand(corpus, record_ids, augmenter, seed)
        # noise and other keywords are negatives
        labels = np.array([corpus.record(i).keyword_label == keyword for i in ids], dtype=bool)
        return cls(features, ids, labels)


def evaluate(
    detector: KeywordDetector,
    eval_set: EvalSet,
    keyword: str,
    mode: str = "probability",
) -> ScoreSet:
    scores = score_features(detector, eval_set.features, mode)
    return ScoreSet.from_arrays(scores, eval_set.labels, keyword=keyword, mode=mode)


# ============================================================
# ADAPTATION
# ============================================================

@dataclass
class AdaptResult:
    detector: KeywordDetector
    plan: TrainablePlan
    log: list[TrainLogEntry]
    best_epoch: Optional[int]
    best_valid_ap: Optional[float]


def _check_frozen(detector: KeywordDetector, reference: dict[str, torch.Tensor], plan: TrainablePlan) -> None:
    for name, param in detector.named_parameters():
        if name in plan.names or name not in reference:
            continue
        if not torch.equal(param.detach(), reference[name]):
            raise FrozenParameterError(f"frozen parameter {name} changed during adaptation")


def adapt(
    pair: ModelPair,
    task: FewShotTask,
    corpus: Corpus,
    method: MethodKind = MethodKind.TA_ADAPTER,
    opt: OptimizerConfig = OptimizerConfig(),
    comp: BatchComposition = BatchComposition(),
    augmentation: AugmentationConfig = AugmentationConfig(),
    spec: Optional[AdapterSpec] = None,
    head_init: str = "te",
    seed: int = 0,
    valid_set: Optional[EvalSet] = None,
) -> AdaptResult:
    """
    Adapt a detector for task.keyword.

    Only the parameters selected by the adapter spec change; running statistics
    of non-adapted BN layers stay frozen. A non-finite loss aborts the
    run with DivergenceError.

    When nothing trains (epochs = 0 or a non-training method) no activation
    sites are installed, so the detector computes exactly the pre-trained
    embedding.
    """
    settings = get_settings()
    spec = spec or method.spec
    if opt.epochs == 0 or not method.trains:
        spec = spec.model_copy(update={"tcfm_sites": frozenset()})
    log = logger.bind(keyword=task.keyword, method=method.value, shots=task.shots, seed=seed)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "adapt", task.keyword))
        detector = build_detector(pair, task.keyword, method, spec, head_init, seed)
        plan = select_trainable(detector, spec)
        plan.apply(detector)
        reference = {n: p.detach().clone() for n, p in detector.named_parameters() if n not in plan.names}

        if opt.epochs == 0 or plan.tunable == 0 or not method.trains:
            detector.requires_grad_(False)
            detector.eval()
            log.info("adapt_skipped", epochs=opt.epochs, tunable=plan.tunable)
            return AdaptResult(detector, plan, [], None, None)

        augmenter = Augmenter.for_corpus(corpus, augmentation, seed)
        if valid_set is None:
            valid_set = EvalSet.build(corpus, task.valid_ids, task.keyword, augmenter, derive_seed(seed, "valid"))

        optimizer = AdamW(plan.parameters(detector), lr=opt.lr, weight_decay=opt.weight_decay)
        scheduler = StepLR(optimizer, step_size=opt.lr_halving_period_epochs, gamma=0.5)
        device = detector.te.device

        entries: list[TrainLogEntry] = []
        best: Optional[ParamSnapshot] = None
        best_epoch, best_ap = None, float("-inf")
        epochs = range(opt.epochs)
        if settings.show_progress:
            epochs = tqdm(epochs, desc=f"adapt {task.keyword}")
        log.info("adapt_started", tunable=plan.tunable, epochs=opt.epochs)
        for epoch in epochs:
            lr = optimizer.param_groups[0]["lr"]
            losses = []
            for b in range(opt.batches_per_epoch):
                batch = compose_batch(task, comp, derive_rng(seed, "batch", epoch, b), corpus, augmenter)
                plan.set_modes(detector)
                loss = detector.loss(
                    torch.from_numpy(batch.features).to(device, detector.te.dtype),
                    torch.from_numpy(batch.classes).to(device),
                )
                if not torch.isfinite(loss):
                    log.error("adapt_diverged", epoch=epoch, lr=lr, loss=float(loss))
                    raise DivergenceError(epoch, lr, float(loss))
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                losses.append(float(loss))
            scheduler.step()

            try:
                valid_ap = compute_ap(evaluate(detector, valid_set, task.keyword))
            except UndefinedMetricError:
                valid_ap = 0.0
            entry = TrainLogEntry(epoch=epoch, loss=float(np.mean(losses)), lr=lr, valid_ap=valid_ap)
            entries.append(entry)
            log.debug("adapt_epoch_finished", **entry.model_dump())
            if valid_ap > best_ap:
                best_ap, best_epoch, best = valid_ap, epoch, snapshot(detector)

        restore(detector, best)
        detector.requires_grad_(False)
        detector.eval()
        _check_frozen(detector, reference, plan)
        log.info("adapt_finished", best_epoch=best_epoch, best_valid_ap=best_ap)
        return AdaptResult(detector, plan, entries, best_epoch, best_ap)


def run_method(
    method: MethodKind,
    task: FewShotTask,
    pair: ModelPair,
    corpus: Corpus,
    opt: OptimizerConfig = OptimizerConfig(),
    comp: BatchComposition = BatchComposition(),
    augmentation: AugmentationConfig = AugmentationConfig(),
    head_init: str = "te",
    seed: int = 0,
    sampling_id: Optional[int] = None,
    spec: Optional[AdapterSpec] = None,
    label: Optional[str] = None,
) -> tuple[MetricsReport, AdaptResult]:
    """
    Adapt with spec (the method's own when None) and report EER/AP on the
    augmented test set under label, which defaults to the method name.
    """
    label = label or method.value
    result = adapt(
        pair, task, corpus, method, opt, comp, augmentation, spec=spec, head_init=head_init, seed=seed
    )
    augmenter = Augmenter.for_corpus(corpus, augmentation, seed)
    test_set = EvalSet.build(corpus, task.test_ids, task.keyword, augmenter, derive_seed(seed, "test"))
    scores = evaluate(result.detector, test_set, task.keyword, method.score_mode)
    report = evaluate_score_set(scores, method=label, shots=task.shots, sampling_id=sampling_id)
    logger.info(
        "method_evaluated",
        method=label,
        keyword=task.keyword,
        shots=task.shots,
        eer=report.eer,
        ap=report.ap,
    )
    return report, result


# ============================================================
# TOY PRE-TRAINING
# ============================================================

def pretrain_toy(
    corpus: Corpus,
    config: PretrainConfig = PretrainConfig(),
    augmentation: AugmentationConfig = AugmentationConfig(),
    seed: int = 0,
) -> ModelPair:
    """
    Align acoustic and text embeddings with a symmetric contrastive loss.

    Each step takes groups_per_batch training utterances of every
    keyword. Audio-to-text is cross-entropy over keywords; text-to-audio
    averages the log-likelihood of all utterances of the keyword.
    """
    settings = get_settings()
    manifest = corpus.manifest
    train = [r for r in manifest.by_split("train") if not r.is_noise]
    keywords = [k for k in manifest.keyword_inventory if any(r.keyword_label == k for r in train)]
    if len(keywords) < 2:
        raise PretrainingError(f"pre-training needs at least 2 keywords with training data, found {len(keywords)}")
    pools = {k: [r.id for r in train if r.keyword_label == k] for k in keywords}
    augmenter = Augmenter.for_corpus(corpus, augmentation, seed) if config.augment else None

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "pretrain-init"))
        encoder = build_encoder(config.encoder)
        text = build_text_encoder(config.text)
        params = list(encoder.parameters()) + list(text.parameters())
        optimizer = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)

        g = config.groups_per_batch
        labels = torch.arange(len(keywords)).repeat_interleave(g)
        positives = F.one_hot(labels, len(keywords)).T.to(torch.float32)

        epochs = range(config.epochs)
        if settings.show_progress:
            epochs = tqdm(epochs, desc="pretrain")
        logger.info("pretrain_started", keywords=len(keywords), epochs=config.epochs)
        for epoch in epochs:
            encoder.train()
            text.train()
            losses = []
            for step in range(config.steps_per_epoch):
                rng = derive_rng(seed, "pretrain", epoch, step)
                batch = []
                for k in keywords:
                    for index in rng.integers(0, len(pools[k]), size=g):
                        x = corpus.features(pools[k][int(index)])
                        batch.append(augmenter(x, rng) if augmenter is not None else x)
                ae = encoder(torch.from_numpy(np.stack(batch).astype(np.float32)))
                te = text.encode_batch(keywords)
                logits = ae @ te.T / config.temperature
                loss_audio = F.cross_entropy(logits, labels)
                log_probs = F.log_softmax(logits.T, dim=1)
                loss_text = -((log_probs * positives).sum(dim=1) / g).mean()
                loss = 0.5 * (loss_audio + loss_text)
                if not torch.isfinite(loss):
                    raise DivergenceError(epoch, config.lr, float(loss))
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                losses.append(float(loss))
            logger.debug("pretrain_epoch_finished", epoch=epoch, loss=float(np.mean(losses)))

    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    pair = ModelPair(encoder, freeze(text))
    logger.info("pretrain_finished", margin=alignment_margin(pair, corpus))
    return pair


def alignment_margin(pair: ModelPair, corpus: Corpus, split: str = "valid") -> float:
    """Mean same-keyword AE-TE cosine minus mean cross-keyword cosine."""
    records = [r for r in corpus.manifest.by_split(split) if not r.is_noise]
    keywords = corpus.manifest.keyword_inventory
    if not records or len(keywords) < 2:
        return 0.0
    index = {k: i for i, k in enumerate(keywords)}
    with torch.no_grad():
        ae = pair.encoder(torch.from_numpy(np.stack([corpus.features(r.id) for r in records])))
        te = pair.text.encode_batch(keywords).to(ae.dtype)
        sims = ae @ te.T
    own = torch.tensor([index[r.keyword_label] for r in records])
    mask = F.one_hot(own, len(keywords)).bool()
    return float(sims[mask].mean() - sims[~mask].mean())
