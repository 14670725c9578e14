"""
Pydantic models for configuration, reports and dataset records.

These models serve 3 purposes:
1. Validate run documents before any computation starts
2. Serialize reports and manifests as JSON
3. Document every declarative type of the toolkit in one place
"""

from enum import Enum
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# ============================================================
# ENUMS
# ============================================================

class LayerGroupId(str, Enum):
    """
    Layer groups of the acoustic encoder.

    G0 stem, G1-G3 SE-Res2Blocks, G4 aggregation layer,
    G5 attentive pooling, G6 embedding layer.
    """
    G0 = "G0"
    G1 = "G1"
    G2 = "G2"
    G3 = "G3"
    G4 = "G4"
    G5 = "G5"
    G6 = "G6"

    @property
    def index(self) -> int:
        return int(self.value[1:])


ALL_GROUPS = tuple(LayerGroupId)
SE_GROUPS = frozenset({LayerGroupId.G1, LayerGroupId.G2, LayerGroupId.G3})
SITE_GROUPS = frozenset(g for g in LayerGroupId if g is not LayerGroupId.G6)


class ParamKind(str, Enum):
    CONV = "CONV"
    BN = "BN"
    SE = "SE"
    FC = "FC"
    ATTN = "ATTN"
    LAF = "LAF"


class ClassifierMode(str, Enum):
    FIXED_TE = "FIXED_TE"
    LEARNED_FC = "LEARNED_FC"


class ConditioningMode(str, Enum):
    NONE = "NONE"
    TCFM = "TCFM"
    ADAIN_KAM = "ADAIN_KAM"


class UtteranceClass(int, Enum):
    """Per-utterance label inside a composed batch."""
    NON_TARGET = 0
    TARGET = 1
    NOISE = 2


NOISE_LABEL = "_noise_"


# ============================================================
# MODEL CONFIGURATION
# ============================================================

class EncoderConfig(BaseModel):
    """
    Shape of the compact ECAPA-style acoustic encoder.

    Defaults give the reference encoder size (~2.21 M parameters).
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_mels: int = Field(default=40, ge=1, description="Feature bins per frame")
    channels: int = Field(default=256, ge=1, description="Block channel width C")
    res2_scale: int = Field(default=8, ge=2, description="Res2Net split factor")
    n_blocks: int = Field(default=3, description="SE-Res2Blocks (always 3)")
    attn_channels: int = Field(default=128, ge=1)
    embed_dim: int = Field(default=512, ge=1, description="Shared embedding size d")
    dilations: tuple[int, ...] = (2, 3, 4)
    se_channels: int = Field(default=64, ge=1, description="SE bottleneck width")
    stem_kernel: int = Field(default=5, ge=1)
    res2_kernel: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def check_architecture(self):
        if self.n_blocks != 3:
            raise ValueError("n_blocks must be 3 (the encoder has exactly three SE-Res2Blocks)")
        if self.channels % self.res2_scale != 0:
            raise ValueError(
                f"channels ({self.channels}) must be divisible by res2_scale ({self.res2_scale})"
            )
        if len(self.dilations) != self.n_blocks:
            raise ValueError("dilations must list one dilation per block")
        if any(d < 1 for d in self.dilations):
            raise ValueError("dilations must be positive")
        return self


class TextEncoderConfig(BaseModel):
    """Character-level text encoder shape."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    embed_dim: int = Field(default=512, ge=1, description="Must equal EncoderConfig.embed_dim")
    char_dim: int = Field(default=32, ge=1)
    hidden: int = Field(default=128, ge=1)
    n_layers: int = Field(default=2, ge=1)
    kernel_size: int = Field(default=3, ge=1)


# ============================================================
# ADAPTATION
# ============================================================

class AdapterSpec(BaseModel):
    """
    Declarative selection of the parameters tuned during adaptation.

    Example:
    {
        "bn_groups": ["G0", "G1", "G2", "G3", "G5", "G6"],
        "se_groups": ["G3"],
        "tcfm_sites": ["G4", "G5"],
        "classifier": "FIXED_TE",
        "conditioning": "TCFM"
    }
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    bn_groups: frozenset[LayerGroupId] = frozenset()
    se_groups: frozenset[LayerGroupId] = frozenset()
    tcfm_sites: frozenset[LayerGroupId] = frozenset()
    classifier: ClassifierMode = ClassifierMode.FIXED_TE
    conditioning: ConditioningMode = ConditioningMode.NONE
    train_all: bool = Field(default=False, description="Unfreeze every acoustic parameter")

    @field_validator("se_groups")
    @classmethod
    def se_groups_have_se(cls, v: frozenset[LayerGroupId]) -> frozenset[LayerGroupId]:
        bad = sorted(g.value for g in v - SE_GROUPS)
        if bad:
            raise ValueError(f"groups {bad} contain no SE module")
        return v

    @field_validator("tcfm_sites")
    @classmethod
    def tcfm_sites_have_activations(cls, v: frozenset[LayerGroupId]) -> frozenset[LayerGroupId]:
        if LayerGroupId.G6 in v:
            raise ValueError("G6 has no activation site")
        return v

    @model_validator(mode="after")
    def sites_need_tcfm(self):
        if self.tcfm_sites and self.conditioning is not ConditioningMode.TCFM:
            raise ValueError("tcfm_sites requires conditioning = TCFM")
        return self

    def describe(self) -> str:
        """Short selector label, e.g. 'BN[G0,G1] SE[G3] TCFM[G4,G5] clf=FIXED_TE'."""
        def fmt(groups):
            return ",".join(sorted(g.value for g in groups))

        parts = []
        if self.train_all:
            parts.append("ALL")
        if self.bn_groups:
            parts.append(f"BN[{fmt(self.bn_groups)}]")
        if self.se_groups:
            parts.append(f"SE[{fmt(self.se_groups)}]")
        if self.tcfm_sites:
            parts.append(f"TCFM[{fmt(self.tcfm_sites)}]")
        if self.conditioning is ConditioningMode.ADAIN_KAM:
            parts.append("KAM")
        parts.append(f"clf={self.classifier.value}")
        return " ".join(parts)


class NamedSpec(BaseModel):
    """An AdapterSpec with a report label and optional reference count."""
    model_config = ConfigDict(extra="forbid")

    label: str
    spec: AdapterSpec
    reference_k: Optional[float] = Field(default=None, description="Reference count in thousands")
    note: str = ""


class AuditRow(BaseModel):
    label: str
    selector: str
    tunable: int
    percent: float
    reference_k: Optional[float] = None
    note: str = ""


class AuditReport(BaseModel):
    rows: list[AuditRow]
    total_params: int


# ============================================================
# TRAINING
# ============================================================

class BatchComposition(BaseModel):
    """
    Utterance mix of one adaptation mini-batch.

    Defaults follow the 128 target / 96 non-target / 32 noise recipe.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    total: int = 256
    n_target: int = 128
    n_nontarget: int = 96
    n_noise: int = 32

    @model_validator(mode="after")
    def counts_add_up(self):
        if self.n_target < 1:
            raise ValueError("n_target must be at least 1")
        if self.n_nontarget < 0 or self.n_noise < 0:
            raise ValueError("counts must be non-negative")
        if self.n_target + self.n_nontarget + self.n_noise != self.total:
            raise ValueError(
                f"n_target + n_nontarget + n_noise must equal total ({self.total})"
            )
        return self

    @classmethod
    def scaled(cls, total: int, ratio: tuple[int, int, int] = (128, 96, 32)) -> "BatchComposition":
        """
        Scale the ratio to a new total with largest-remainder rounding.

        Remainder ties go to the earlier class (target, then non-target).
        """
        weight = sum(ratio)
        exact = [total * r / weight for r in ratio]
        counts = [int(x) for x in exact]
        order = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
        for i in order[: total - sum(counts)]:
            counts[i] += 1
        return cls(total=total, n_target=counts[0], n_nontarget=counts[1], n_noise=counts[2])


class OptimizerConfig(BaseModel):
    """
    AdamW with step halving.

    Defaults: lr 1e-5 halved every 20 epochs for 150 epochs, weight decay 1e-5.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["adamw"] = "adamw"
    lr: float = Field(default=1e-5, gt=0)
    lr_halving_period_epochs: int = Field(default=20, ge=1)
    epochs: int = Field(default=150, ge=0)
    weight_decay: float = Field(default=1e-5, ge=0)
    batches_per_epoch: int = Field(default=4, ge=1)


class PretrainConfig(BaseModel):
    """Toy joint pre-training of the acoustic and text encoders."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    encoder: EncoderConfig = EncoderConfig()
    text: TextEncoderConfig = TextEncoderConfig()
    epochs: int = Field(default=30, ge=1)
    steps_per_epoch: int = Field(default=8, ge=1)
    groups_per_batch: int = Field(default=4, ge=1, description="Utterances per keyword per batch")
    lr: float = Field(default=2e-3, gt=0)
    weight_decay: float = Field(default=1e-4, ge=0)
    temperature: float = Field(default=0.1, gt=0)
    augment: bool = True

    @model_validator(mode="after")
    def shared_space(self):
        if self.encoder.embed_dim != self.text.embed_dim:
            raise ValueError("encoder.embed_dim and text.embed_dim must match (shared space)")
        return self


class TrainLogEntry(BaseModel):
    epoch: int
    loss: float
    lr: float
    valid_ap: float


# ============================================================
# DATA
# ============================================================

class AugmentationConfig(BaseModel):
    """
    Noise and reverberation applied to utterances.

    SNR is measured on feature-domain power (mean square of the
    feature matrix before and after mixing).
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    enabled: bool = True
    snr_db_range: tuple[float, float] = (5.0, 25.0)
    noise: bool = True
    reverb: bool = True
    mode: Literal["joint", "independent"] = "joint"
    expansion_factor: int = Field(default=4, ge=1)
    rir_decay_range: tuple[float, float] = Field(
        default=(0.5, 3.0), description="Exponential decay length of synthetic RIRs, in frames"
    )
    rir_length: int = Field(default=8, ge=1)
    n_synthetic_rirs: int = Field(default=16, ge=0)

    @field_validator("snr_db_range", "rir_decay_range")
    @classmethod
    def range_not_degenerate(cls, v: tuple[float, float]) -> tuple[float, float]:
        if not v[0] < v[1]:
            raise ValueError("range must satisfy low < high")
        return v


class UtteranceRecord(BaseModel):
    id: str
    keyword_label: str = Field(..., description=f"Keyword text or {NOISE_LABEL!r}")
    split: Literal["train", "valid", "test"]
    audio_path: Optional[str] = None
    synthetic: Optional[dict[str, int]] = None

    @property
    def is_noise(self) -> bool:
        return self.keyword_label == NOISE_LABEL


class DatasetManifest(BaseModel):
    records: list[UtteranceRecord]
    keyword_inventory: list[str]
    seen: list[str] = Field(default_factory=list)
    unseen: list[str] = Field(default_factory=list)
    warnings: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_consistency(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("utterance ids must be unique")
        inventory = set(self.keyword_inventory)
        labels = {r.keyword_label for r in self.records if not r.is_noise}
        missing = sorted(labels - inventory)
        if missing:
            raise ValueError(f"labels {missing} missing from keyword_inventory")
        if set(self.seen) & set(self.unseen):
            raise ValueError("seen and unseen keywords must be disjoint")
        if (self.seen or self.unseen) and set(self.seen) | set(self.unseen) != inventory:
            raise ValueError("seen and unseen must cover the keyword inventory")
        return self

    def by_split(self, split: str) -> list[UtteranceRecord]:
        return [r for r in self.records if r.split == split]


class FewShotTask(BaseModel):
    """
    One sampling of a few-shot adaptation problem.

    train_ids are the positive shots; the pools hold what batches draw
    non-target and noise utterances from.
    """
    keyword: str
    shots: int
    sampling_seed: int
    train_ids: list[str]
    nontarget_pool: list[str]
    noise_pool: list[str]
    valid_ids: list[str]
    test_ids: list[str]

    @field_validator("shots")
    @classmethod
    def shots_in_protocol(cls, v: int) -> int:
        if v not in (5, 10, 15):
            raise ValueError("shots must be one of 5, 10, 15")
        return v

    @model_validator(mode="after")
    def shots_selected(self):
        if len(self.train_ids) != self.shots:
            raise ValueError("train_ids must hold exactly `shots` utterances")
        return self


# ============================================================
# METRICS
# ============================================================

class DetectionScore(BaseModel):
    score: float
    label: bool


class ScoreSet(BaseModel):
    """Labeled detection scores for one keyword."""
    keyword: str
    mode: Literal["probability", "cosine"] = "probability"
    scores: list[DetectionScore]

    @classmethod
    def from_arrays(cls, scores, labels, keyword: str, mode: str = "probability") -> "ScoreSet":
        return cls(
            keyword=keyword,
            mode=mode,
            scores=[DetectionScore(score=float(s), label=bool(y)) for s, y in zip(scores, labels)],
        )

    @property
    def n_pos(self) -> int:
        return sum(s.label for s in self.scores)

    @property
    def n_neg(self) -> int:
        return len(self.scores) - self.n_pos


class MetricsReport(BaseModel):
    """EER and AP in percent. sampling_id is None for aggregated rows."""
    keyword: str
    method: str = ""
    shots: int = 0
    mode: str = "probability"
    eer: float = Field(..., ge=0, le=100)
    ap: float = Field(..., ge=0, le=100)
    n_pos: int
    n_neg: int
    sampling_id: Optional[int] = None
    n_samplings: int = 1


# ============================================================
# METHODS
# ============================================================

class MethodKind(str, Enum):
    """
    Adaptation strategies compared by the toolkit.

    Each maps to a fixed AdapterSpec and head; see the properties below.
    """
    PRETRAINED = "PRETRAINED"
    TA_ADAPTER = "TA_ADAPTER"
    FT_FULL = "FT_FULL"
    FT_CLF = "FT_CLF"
    TWO_CLASS_CLF = "TWO_CLASS_CLF"
    THREE_CLASS_CLF = "THREE_CLASS_CLF"
    KAM_ADAIN = "KAM_ADAIN"

    @property
    def spec(self) -> AdapterSpec:
        everything = dict(train_all=True, classifier=ClassifierMode.LEARNED_FC)
        return {
            "PRETRAINED": AdapterSpec(),
            "TA_ADAPTER": AdapterSpec(
                bn_groups=frozenset(ALL_GROUPS),
                se_groups=frozenset({LayerGroupId.G3}),
                tcfm_sites=frozenset({LayerGroupId.G4, LayerGroupId.G5}),
                classifier=ClassifierMode.FIXED_TE,
                conditioning=ConditioningMode.TCFM,
            ),
            "FT_FULL": AdapterSpec(**everything),
            "FT_CLF": AdapterSpec(classifier=ClassifierMode.LEARNED_FC),
            "TWO_CLASS_CLF": AdapterSpec(**everything),
            "THREE_CLASS_CLF": AdapterSpec(**everything),
            "KAM_ADAIN": AdapterSpec(
                train_all=True,
                classifier=ClassifierMode.FIXED_TE,
                conditioning=ConditioningMode.ADAIN_KAM,
            ),
        }[self.value]

    @property
    def head(self) -> str:
        return {
            "PRETRAINED": "te",
            "TA_ADAPTER": "te",
            "FT_FULL": "fc",
            "FT_CLF": "fc",
            "TWO_CLASS_CLF": "softmax2",
            "THREE_CLASS_CLF": "softmax3",
            "KAM_ADAIN": "te",
        }[self.value]

    @property
    def uses_kam(self) -> bool:
        return self is MethodKind.KAM_ADAIN

    @property
    def trains(self) -> bool:
        return self is not MethodKind.PRETRAINED

    @property
    def score_mode(self) -> str:
        # frozen scoring reports the raw cosine
        return "cosine" if self is MethodKind.PRETRAINED else "probability"


# ============================================================
# RUN DOCUMENTS
# ============================================================

class ToyDatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_keywords: int = Field(default=8, ge=2, le=35)
    n_per_keyword: int = Field(default=40, ge=5)
    n_noise: int = Field(default=20, ge=5)
    seed: int = 7
    n_mels: int = Field(default=40, ge=1)
    frames: int = Field(default=64, ge=8)


class DataConfig(BaseModel):
    """
    Where utterances come from: a directory (GSC-style root or a saved
    toy dataset) or a toy dataset generated in memory.
    """
    model_config = ConfigDict(extra="forbid")

    path: Optional[str] = None
    toy: Optional[ToyDatasetConfig] = None
    frames: int = Field(default=64, ge=1, description="Frames per utterance after crop/pad")

    @model_validator(mode="after")
    def one_source(self):
        if (self.path is None) == (self.toy is None):
            raise ValueError("exactly one of data.path and data.toy must be set")
        return self


class TrainingRunConfig(BaseModel):
    """Options shared by every command that adapts models."""
    model_config = ConfigDict(extra="forbid")

    optimizer: OptimizerConfig = OptimizerConfig()
    composition: BatchComposition = BatchComposition()
    augmentation: AugmentationConfig = AugmentationConfig()
    head_init: Literal["te", "scratch"] = "te"


class PretrainRun(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: DataConfig
    pretrain: PretrainConfig = PretrainConfig()
    augmentation: AugmentationConfig = AugmentationConfig()
    seed: int = 0
    out: str = "runs/pretrain"


class AdaptRun(TrainingRunConfig):
    data: DataConfig
    checkpoint: str = Field(..., description="Pre-trained model pair")
    keyword: str
    shots: int = 15
    method: MethodKind = MethodKind.TA_ADAPTER
    spec: Optional[AdapterSpec] = Field(default=None, description="Replaces the method's adapter spec")
    sampling_id: int = Field(default=0, ge=0)
    seed: int = 0
    out: str = "runs/adapt"

    @field_validator("shots")
    @classmethod
    def shots_in_protocol(cls, v: int) -> int:
        if v not in (5, 10, 15):
            raise ValueError("shots must be one of 5, 10, 15")
        return v


class EvalRun(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: DataConfig
    checkpoints: list[str] = Field(..., min_length=1, description="Adapted detector checkpoints")
    augmentation: AugmentationConfig = AugmentationConfig()
    seed: int = 0
    out: str = "runs/eval"


class AuditRun(BaseModel):
    model_config = ConfigDict(extra="forbid")

    encoder: EncoderConfig = EncoderConfig()
    specs: Optional[list[NamedSpec]] = Field(
        default=None, description="Rows to audit; the reference catalogue when omitted"
    )
    out: str = "runs/audit"


class PlotLafRun(BaseModel):
    """
    Profiles come from adapted detector checkpoints, or from a
    pre-trained pair with freshly installed (uniform) sites.
    """
    model_config = ConfigDict(extra="forbid")

    checkpoints: list[str] = Field(default_factory=list)
    pretrained: Optional[str] = None
    keywords: list[str] = Field(default_factory=list)
    sites: frozenset[LayerGroupId] = frozenset({LayerGroupId.G4, LayerGroupId.G5})
    points: int = Field(default=121, ge=1)
    out: str = "runs/laf"

    @model_validator(mode="after")
    def has_source(self):
        if not self.checkpoints and not (self.pretrained and self.keywords):
            raise ValueError("set checkpoints, or pretrained together with keywords")
        if LayerGroupId.G6 in self.sites:
            raise ValueError("G6 has no activation site")
        return self


class AblateRun(TrainingRunConfig):
    data: DataConfig
    pretrained: Optional[str] = Field(default=None, description="Model pair checkpoint")
    pretrain: PretrainConfig = Field(
        default_factory=PretrainConfig, description="Used when no pretrained checkpoint is given"
    )
    methods: list[MethodKind] = Field(
        default_factory=lambda: [
            MethodKind.PRETRAINED, MethodKind.TA_ADAPTER, MethodKind.FT_CLF, MethodKind.FT_FULL,
        ],
        min_length=1,
    )
    specs: list[NamedSpec] = Field(
        default_factory=list, description="Extra rows: each spec adapted with spec_method, reported under its label"
    )
    spec_method: MethodKind = MethodKind.TA_ADAPTER
    keywords: Optional[list[str]] = None
    shots: list[int] = Field(default_factory=lambda: [15], min_length=1)
    samplings: int = Field(default=5, ge=1)
    workers: int = Field(default=1, ge=1)
    seed: int = 0
    out: str = "runs/ablate"

    @field_validator("shots")
    @classmethod
    def shots_in_protocol(cls, v: list[int]) -> list[int]:
        bad = [s for s in v if s not in (5, 10, 15)]
        if bad:
            raise ValueError(f"shots must be among 5, 10, 15; got {bad}")
        return v

    @field_validator("specs")
    @classmethod
    def spec_labels_unique(cls, v: list[NamedSpec]) -> list[NamedSpec]:
        labels = [s.label for s in v]
        if len(set(labels)) != len(labels):
            raise ValueError("spec labels must be unique")
        return v
