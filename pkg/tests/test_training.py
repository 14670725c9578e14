"""
Tests for batch composition, the adaptation loop and toy pre-training.
"""

import numpy as np
import pytest
import torch
from torch.func import functional_call

from takws.core.errors import DataError, DivergenceError, PretrainingError
from takws.models.schemas import (
    AdapterSpec,
    AugmentationConfig,
    BatchComposition,
    ConditioningMode,
    EncoderConfig,
    LayerGroupId,
    MethodKind,
    OptimizerConfig,
    PretrainConfig,
    TextEncoderConfig,
    UtteranceClass,
)
from takws.networks.detector import KeywordDetector, ModelPair
from takws.networks.encoder import build_encoder
from takws.networks.text_encoder import build_text_encoder, freeze
from takws.services.adaptation import restore, select_trainable, snapshot
from takws.services.data import Augmenter, Corpus, InMemoryFrontend, derive_rng, make_toy_dataset, sample_few_shot
from takws.services.training import (
    EvalSet,
    adapt,
    alignment_margin,
    build_detector,
    compose_batch,
    evaluate,
    lr_at_epoch,
    pretrain_toy,
    run_method,
)

G = LayerGroupId


@pytest.fixture
def task(toy_data):
    manifest, _ = toy_data
    return sample_few_shot(manifest, "cat", 5, sampling_seed=0)


# ============================================================
# SCHEDULE AND BATCHES
# ============================================================

def test_lr_schedule_halves_every_period():
    """Verify lr(epoch) = lr0 * 2^-floor(epoch / 20) over 150 epochs, matching StepLR."""
    opt = OptimizerConfig()
    param = torch.nn.Parameter(torch.zeros(1))
    optimizer = torch.optim.AdamW([param], lr=opt.lr)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=20, gamma=0.5)

    for epoch in range(150):
        assert lr_at_epoch(opt, epoch) == opt.lr * 2.0 ** -(epoch // 20)
        assert optimizer.param_groups[0]["lr"] == pytest.approx(lr_at_epoch(opt, epoch), rel=1e-12)
        optimizer.step()
        scheduler.step()


def test_composed_batch_counts(task, toy_corpus):
    """Verify the 128 / 96 / 32 composition at total 256."""
    augmenter = Augmenter.for_corpus(toy_corpus, AugmentationConfig(), seed=0)
    batch = compose_batch(task, BatchComposition(), derive_rng(0, "b"), toy_corpus, augmenter)

    assert batch.counts() == (128, 96, 32)
    assert batch.features.shape == (256, 32, 12)
    targets = {batch.ids[i] for i in np.flatnonzero(batch.classes == UtteranceClass.TARGET)}
    assert targets <= set(task.train_ids)


def test_composed_batch_at_scaled_total(task, toy_corpus):
    batch = compose_batch(task, BatchComposition.scaled(64), derive_rng(0, "b"), toy_corpus)

    assert batch.counts() == (32, 24, 8)


def test_composed_batch_needs_pools(task, toy_corpus):
    empty = task.model_copy(update={"noise_pool": []})

    with pytest.raises(DataError):
        compose_batch(empty, BatchComposition(), derive_rng(0), toy_corpus)
    compose_batch(empty, BatchComposition(total=10, n_target=5, n_nontarget=5, n_noise=0), derive_rng(0), toy_corpus)


# ============================================================
# ADAPTATION
# ============================================================

def test_zero_epochs_returns_pretrained_state(toy_pair, task, toy_corpus, fixed_batch):
    """Verify epochs = 0 gives the pre-trained encoder bitwise: same state and same embeddings."""
    result = adapt(toy_pair, task, toy_corpus, opt=OptimizerConfig(epochs=0))

    assert result.log == []
    assert not result.detector.encoder.has_conditioning()
    reference = toy_pair.encoder.state_dict()
    adapted = result.detector.encoder.state_dict()
    assert adapted.keys() == reference.keys()
    for name, value in adapted.items():
        assert torch.equal(value, reference[name])

    toy_pair.encoder.eval()
    with torch.no_grad():
        assert torch.equal(result.detector.embed(fixed_batch), toy_pair.encoder(fixed_batch))


def test_pretrained_method_installs_no_sites(toy_pair, task, toy_corpus, quick_optimizer):
    result = adapt(toy_pair, task, toy_corpus, MethodKind.PRETRAINED, quick_optimizer)

    assert not result.detector.encoder.has_conditioning()
    assert result.plan.tunable == 0


def test_installed_sites_start_near_relu(toy_pair, fixed_batch):
    """Verify a fresh TA-adapter detector starts close to the pre-trained embedding."""
    detector = build_detector(toy_pair, "cat", MethodKind.TA_ADAPTER).eval()
    uniform = build_detector(toy_pair, "cat", MethodKind.TA_ADAPTER, relu_logit=0.0).eval()
    toy_pair.encoder.eval()

    with torch.no_grad():
        reference = toy_pair.encoder(fixed_batch)
        near = (detector.embed(fixed_batch) - reference).abs().max()
        far = (uniform.embed(fixed_batch) - reference).abs().max()
    assert near < far


def test_adapt_log_and_frozen_parameters(
    toy_pair, task, toy_corpus, quick_optimizer, small_batch, light_augmentation
):
    """Verify the lr trace, frozen-parameter invariance and that the pair is untouched."""
    pair_state = {k: v.clone() for k, v in toy_pair.encoder.state_dict().items()}
    result = adapt(
        toy_pair, task, toy_corpus, MethodKind.TA_ADAPTER, quick_optimizer, small_batch, light_augmentation, seed=1
    )

    assert [e.lr for e in result.log] == pytest.approx([1e-2, 5e-3, 2.5e-3])
    assert result.best_epoch in (0, 1, 2)
    assert result.best_valid_ap == max(e.valid_ap for e in result.log)

    adapted = dict(result.detector.named_parameters())
    changed = {n for n, p in adapted.items() if n.startswith("encoder.") and n[8:] in pair_state
               and not torch.equal(p, pair_state[n[8:]])}
    assert changed <= result.plan.names
    for name, value in toy_pair.encoder.state_dict().items():
        assert torch.equal(value, pair_state[name])


def test_adapt_is_reproducible(toy_pair, task, toy_corpus, quick_optimizer, small_batch, light_augmentation):
    """Verify the same seed gives bitwise identical adapted detectors."""
    runs = [
        adapt(toy_pair, task, toy_corpus, MethodKind.TA_ADAPTER, quick_optimizer, small_batch, light_augmentation, seed=2)
        for _ in range(2)
    ]
    first, second = (r.detector.state_dict() for r in runs)

    assert all(torch.equal(first[k], second[k]) for k in first)
    assert [e.loss for e in runs[0].log] == [e.loss for e in runs[1].log]


def test_restore_after_fifty_steps_is_bitwise(
    toy_pair, task, toy_corpus, small_batch, light_augmentation, fixed_batch
):
    """Verify a snapshot of a 50-step TA-adapter run restores bitwise identical outputs."""
    opt = OptimizerConfig(lr=1e-2, epochs=5, lr_halving_period_epochs=2, batches_per_epoch=10)
    result = adapt(toy_pair, task, toy_corpus, MethodKind.TA_ADAPTER, opt, small_batch, light_augmentation, seed=3)
    detector = result.detector
    assert len(result.log) == 5

    snap = snapshot(detector)
    with torch.no_grad():
        expected = detector(fixed_batch)
        for p in detector.parameters():
            p.add_(0.05)
        assert not torch.equal(detector(fixed_batch), expected)

    restore(detector, snap)
    with torch.no_grad():
        assert torch.equal(detector(fixed_batch), expected)


def test_adaptation_leaves_text_embedding_unchanged(
    toy_pair, task, toy_corpus, quick_optimizer, small_batch, light_augmentation
):
    before = toy_pair.te("cat").clone()
    text_state = {k: v.clone() for k, v in toy_pair.text.state_dict().items()}

    result = adapt(toy_pair, task, toy_corpus, MethodKind.TA_ADAPTER, quick_optimizer, small_batch, light_augmentation)

    assert torch.equal(toy_pair.te("cat"), before)
    assert torch.equal(result.detector.te, before)
    assert all(torch.equal(v, text_state[k]) for k, v in toy_pair.text.state_dict().items())


def test_divergence_aborts(monkeypatch, toy_pair, task, toy_corpus, quick_optimizer, small_batch, light_augmentation):
    """Verify a non-finite loss raises with the failing epoch."""
    monkeypatch.setattr(KeywordDetector, "loss", lambda self, x, c: torch.tensor(float("nan")))

    with pytest.raises(DivergenceError) as exc:
        adapt(toy_pair, task, toy_corpus, MethodKind.TA_ADAPTER, quick_optimizer, small_batch, light_augmentation)
    assert exc.value.epoch == 0
    assert exc.value.lr == pytest.approx(1e-2)


@pytest.mark.parametrize(
    "method", [MethodKind.FT_CLF, MethodKind.THREE_CLASS_CLF, MethodKind.KAM_ADAIN]
)
def test_baseline_methods_run(method, toy_pair, task, toy_corpus, small_batch, light_augmentation):
    """Verify every baseline adapts and yields a finite report."""
    opt = OptimizerConfig(lr=1e-3, epochs=1, batches_per_epoch=1)
    report, result = run_method(
        method, task, toy_pair, toy_corpus, opt, small_batch, light_augmentation, seed=0, sampling_id=0
    )

    assert 0.0 <= report.eer <= 100.0
    assert 0.0 <= report.ap <= 100.0
    assert report.method == method.value
    assert len(result.log) == 1


def test_pretrained_scoring_is_cosine(toy_pair, task, toy_corpus, light_augmentation):
    """Verify PRETRAINED skips training and reports raw cosine scores."""
    report, result = run_method(MethodKind.PRETRAINED, task, toy_pair, toy_corpus, augmentation=light_augmentation)

    assert result.log == []
    assert report.mode == "cosine"
    augmenter = Augmenter.for_corpus(toy_corpus, light_augmentation, 0)
    eval_set = EvalSet.build(toy_corpus, task.test_ids[:6], "cat", augmenter, seed=0)
    scores = evaluate(result.detector, eval_set, "cat", "cosine")
    assert all(-1.0 - 1e-6 <= s.score <= 1.0 + 1e-6 for s in scores.scores)


class LossOf(torch.nn.Module):
    """Exposes KeywordDetector.loss as forward, with a fresh conditioning cache per call."""

    def __init__(self, inner):
        super().__init__()
        self.inner = inner

    def forward(self, features, labels):
        self.inner._ctx = None
        return self.inner.loss(features, labels)


def test_gradients_match_finite_differences(tiny_config):
    """Verify analytic gradients of the BCE loss for LAF, SE and BN parameters."""
    torch.manual_seed(0)
    encoder = build_encoder(tiny_config).double()
    encoder.set_activation_sites([G.G4])
    te = torch.nn.functional.normalize(torch.randn(8, dtype=torch.float64), dim=0)
    detector = KeywordDetector(encoder, te)
    with torch.no_grad():
        encoder.mfa.act.laf.w.normal_(0.0, 0.5)
    spec = AdapterSpec(
        bn_groups={G.G1}, se_groups={G.G3}, tcfm_sites={G.G4}, conditioning=ConditioningMode.TCFM
    )
    plan = select_trainable(detector, spec)
    plan.apply(detector)
    names = sorted(plan.names)
    params = dict(detector.named_parameters())
    x = torch.randn(4, 10, tiny_config.n_mels, dtype=torch.float64)
    classes = torch.tensor([1, 0, 1, 2])

    wrapper = LossOf(detector)

    def loss_of(*tensors):
        swapped = {f"inner.{n}": t for n, t in zip(names, tensors)}
        return functional_call(wrapper, swapped, (x, classes))

    inputs = tuple(params[n].detach().clone().requires_grad_(True) for n in names)
    assert torch.autograd.gradcheck(loss_of, inputs, eps=1e-7, atol=1e-6, rtol=1e-4)


def test_gradients_match_for_every_parameter(tiny_config):
    """Verify directional finite differences of the loss against autograd over all encoder parameters."""
    torch.manual_seed(1)
    encoder = build_encoder(tiny_config).double()
    encoder.set_activation_sites([G.G4, G.G5])
    te = torch.nn.functional.normalize(torch.randn(8, dtype=torch.float64), dim=0)
    detector = KeywordDetector(encoder, te).eval()
    with torch.no_grad():
        for site in encoder.activation_sites([G.G4, G.G5]):
            site.laf.w.normal_(0.0, 0.5)
    params = dict(detector.named_parameters())
    names = sorted(params)
    x = torch.randn(4, 10, tiny_config.n_mels, dtype=torch.float64)
    classes = torch.tensor([1, 0, 1, 2])

    wrapper = LossOf(detector)

    def loss_of(*tensors):
        swapped = {f"inner.{n}": t for n, t in zip(names, tensors)}
        return functional_call(wrapper, swapped, (x, classes))

    inputs = tuple(params[n].detach().clone().requires_grad_(True) for n in names)
    assert len(inputs) == len(list(encoder.parameters()))
    assert torch.autograd.gradcheck(loss_of, inputs, eps=1e-6, atol=1e-5, rtol=1e-3, fast_mode=True)


# ============================================================
# PRE-TRAINING
# ============================================================

def test_pretraining_aligns_embeddings(toy_pair, toy_corpus):
    """Verify the toy pair scores matching keywords above mismatched ones."""
    assert alignment_margin(toy_pair, toy_corpus) > 0.0
    assert not any(p.requires_grad for p in toy_pair.encoder.parameters())


def test_untrained_pair_has_no_alignment(tiny_config, tiny_text_config, toy_corpus):
    """Verify randomly initialized encoders show no keyword alignment on average."""
    margins = []
    for seed in range(10):
        torch.manual_seed(seed)
        pair = ModelPair(build_encoder(tiny_config).eval(), freeze(build_text_encoder(tiny_text_config)))
        margins.append(alignment_margin(pair, toy_corpus))

    assert abs(np.mean(margins)) < 0.1


def test_pretraining_needs_two_keywords(tiny_config, tiny_text_config):
    manifest, features = make_toy_dataset(n_keywords=2, n_per_keyword=5, n_noise=5, n_mels=12, frames=16)
    only_one = manifest.model_copy(
        update={"records": [r for r in manifest.records if r.keyword_label != "bed"]}
    )
    corpus = Corpus(only_one, InMemoryFrontend(features), frames=16)
    config = PretrainConfig(encoder=tiny_config, text=tiny_text_config, epochs=1, steps_per_epoch=1)

    with pytest.raises(PretrainingError) as exc:
        pretrain_toy(corpus, config, AugmentationConfig(enabled=False))
    assert isinstance(exc.value, DataError)
    assert exc.value.exit_code == 3


def test_build_detector_copies_encoder(toy_pair):
    detector = build_detector(toy_pair, "bird", MethodKind.TA_ADAPTER)

    assert detector.encoder is not toy_pair.encoder
    assert not toy_pair.encoder.has_conditioning()
    assert detector.encoder.site_count(G.G4) == 1 and detector.encoder.has_conditioning()


# ============================================================
# METHOD ORDERING
# ============================================================

@pytest.mark.slow
def test_ta_adapter_beats_pretrained_on_toy_data():
    """Verify median-over-seeds test AP: TA-adapter above the frozen model, 15 shots at least 5."""
    manifest, features = make_toy_dataset(n_keywords=8, n_per_keyword=40, seed=7, n_noise=20, n_mels=20, frames=32)
    corpus = Corpus(manifest, InMemoryFrontend(features), frames=32)
    config = PretrainConfig(
        encoder=EncoderConfig(n_mels=20, channels=32, res2_scale=4, attn_channels=16, embed_dim=16, se_channels=8),
        text=TextEncoderConfig(embed_dim=16, char_dim=8, hidden=32, n_layers=1),
        epochs=15,
        steps_per_epoch=8,
    )
    pair = pretrain_toy(corpus, config, AugmentationConfig(enabled=False), seed=0)
    opt = OptimizerConfig(lr=1e-3, epochs=10, lr_halving_period_epochs=5, batches_per_epoch=4)
    batch = BatchComposition.scaled(64)

    def mean_ap(method, shots, seed):
        aps = []
        for keyword in manifest.keyword_inventory:
            task = sample_few_shot(manifest, keyword, shots, sampling_seed=seed)
            report, _ = run_method(method, task, pair, corpus, opt, batch, seed=seed)
            aps.append(report.ap)
        return float(np.mean(aps))

    seeds = range(3)
    pretrained = np.median([mean_ap(MethodKind.PRETRAINED, 15, s) for s in seeds])
    five = np.median([mean_ap(MethodKind.TA_ADAPTER, 5, s) for s in seeds])
    fifteen = np.median([mean_ap(MethodKind.TA_ADAPTER, 15, s) for s in seeds])

    assert fifteen > pretrained
    assert fifteen >= five
