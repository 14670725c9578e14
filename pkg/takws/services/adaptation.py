"""
Selective adaptation: which parameters train, how to undo it, and how
many there are.

A TrainablePlan is computed from an AdapterSpec without touching the
model; apply() then flips requires_grad and BatchNorm modes. Snapshots
capture the full state_dict (running statistics included) so reversion
is bitwise.
"""

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import torch
from torch import Tensor, nn

from takws.core.errors import (
    ConfigError,
    IncompatibleSnapshotError,
    SnapshotCorruptionError,
)
from takws.core.logging import get_logger
from takws.models.schemas import (
    ALL_GROUPS,
    SE_GROUPS,
    AdapterSpec,
    AuditReport,
    AuditRow,
    ClassifierMode,
    ConditioningMode,
    LayerGroupId,
    NamedSpec,
    ParamKind,
)
from takws.networks.conditioning import (
    DEFAULT_BASIS,
    ConditioningKind,
    conditioning_param_count,
)
from takws.networks.detector import KeywordDetector
from takws.networks.encoder import EcapaEncoder

logger = get_logger(__name__)

G = LayerGroupId


# ============================================================
# TRAINABLE PLANS
# ============================================================

@dataclass(frozen=True)
class TrainablePlan:
    """
    Exact set of detector parameter names to train.

    Names are relative to the detector ("encoder.blocks.2.se.conv1.weight",
    "head.weight", "kam.adain.projection.weight").
    """
    names: frozenset[str]
    adapted_bn: frozenset[str]
    tunable: int

    def apply(self, detector: KeywordDetector) -> None:
        for name, param in detector.named_parameters():
            param.requires_grad_(name in self.names)
        self.set_modes(detector)

    def set_modes(self, detector: KeywordDetector) -> None:
        """Adapted BN layers update running statistics; all others stay in eval."""
        detector.eval()
        for name, module in detector.named_modules():
            if name in self.adapted_bn:
                module.train()

    def parameters(self, detector: KeywordDetector) -> list[nn.Parameter]:
        return [p for n, p in detector.named_parameters() if n in self.names]


def _bn_module(param_name: str) -> str:
    return param_name.rsplit(".", 1)[0]


def select_trainable(detector: KeywordDetector, spec: AdapterSpec) -> TrainablePlan:
    """Resolve spec against the detector. Raises ConfigError if it names absent modules."""
    encoder = detector.encoder
    tags = encoder.list_parameters()
    names: set[str] = set()
    adapted_bn: set[str] = set()

    for group in spec.se_groups:
        if not any(t.group is group and t.kind is ParamKind.SE for t in tags):
            raise ConfigError(f"group {group.value} contains no SE module")
    for group in spec.tcfm_sites:
        if not any(t.group is group and t.kind is ParamKind.LAF for t in tags):
            raise ConfigError(
                f"no learnable activation installed in {group.value}; install sites before selecting them"
            )

    for t in tags:
        selected = (
            (spec.train_all and t.kind is not ParamKind.LAF)
            or (t.kind is ParamKind.BN and t.group in spec.bn_groups)
            or (t.kind is ParamKind.SE and t.group in spec.se_groups)
            or (t.kind is ParamKind.LAF and t.group in spec.tcfm_sites)
        )
        if selected:
            names.add(f"encoder.{t.name}")
            if t.kind is ParamKind.BN:
                adapted_bn.add(f"encoder.{_bn_module(t.name)}")

    if spec.classifier is ClassifierMode.LEARNED_FC:
        if detector.head is None:
            raise ConfigError("LEARNED_FC classifier requested but the detector has no learned head")
        names.update(f"head.{n}" for n, _ in detector.head.named_parameters())
    if spec.conditioning is ConditioningMode.ADAIN_KAM:
        if detector.kam is None:
            raise ConfigError("ADAIN_KAM conditioning requested but the detector has no KAM")
        names.update(f"kam.{n}" for n, _ in detector.kam.named_parameters())

    params = dict(detector.named_parameters())
    tunable = sum(params[n].numel() for n in names)
    return TrainablePlan(frozenset(names), frozenset(adapted_bn), tunable)


# ============================================================
# SNAPSHOTS
# ============================================================

def _digest(entries: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(entries):
        tensor = entries[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tensor.dtype).encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(tensor.reshape(-1).view(torch.uint8).numpy().tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class ParamSnapshot:
    entries: dict[str, Tensor]
    checksum: str

    def verify(self) -> None:
        if _digest(self.entries) != self.checksum:
            raise SnapshotCorruptionError("snapshot checksum does not match its contents")


def snapshot(model: nn.Module) -> ParamSnapshot:
    """Copy every parameter and buffer of the model."""
    entries = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return ParamSnapshot(entries=entries, checksum=_digest(entries))


def restore(model: nn.Module, snap: ParamSnapshot) -> None:
    """Make every parameter and buffer bitwise equal to the snapshot."""
    snap.verify()
    state = model.state_dict()
    missing = sorted(set(state) - set(snap.entries))
    extra = sorted(set(snap.entries) - set(state))
    if missing or extra:
        raise IncompatibleSnapshotError(
            f"snapshot does not match model: missing {missing[:3]}, unexpected {extra[:3]}"
        )
    for name, value in snap.entries.items():
        if state[name].shape != value.shape or state[name].dtype != value.dtype:
            raise IncompatibleSnapshotError(
                f"{name}: snapshot {tuple(value.shape)}/{value.dtype} vs "
                f"model {tuple(state[name].shape)}/{state[name].dtype}"
            )
    with torch.no_grad():
        for name, value in snap.entries.items():
            state[name].copy_(value)


# ============================================================
# PARAMETER AUDIT
# ============================================================

def spec_param_count(encoder: EcapaEncoder, spec: AdapterSpec, basis_size: int = len(DEFAULT_BASIS)) -> int:
    """
    Tunable parameters a spec would select, from tags alone.

    LAF sites are counted as if installed (d*a + a each), a learned FC
    head as d + 1, and a KAM as its AdaIN projection with bias.
    """
    d = encoder.embed_dim
    count = 0
    for t in encoder.list_parameters():
        if t.kind is ParamKind.LAF:
            continue
        if (
            spec.train_all
            or (t.kind is ParamKind.BN and t.group in spec.bn_groups)
            or (t.kind is ParamKind.SE and t.group in spec.se_groups)
        ):
            count += t.numel
    per_site = conditioning_param_count(ConditioningKind.TCFM, d, a=basis_size).total
    count += sum(encoder.site_count(g) for g in spec.tcfm_sites) * per_site
    if spec.classifier is ClassifierMode.LEARNED_FC:
        count += d + 1
    if spec.conditioning is ConditioningMode.ADAIN_KAM:
        count += conditioning_param_count(
            ConditioningKind.ADAIN, d, f=encoder.frame_channels, adain_bias=True
        ).total
    return count


def base_param_count(encoder: EcapaEncoder) -> int:
    """Encoder parameters excluding any installed learnable activations."""
    return sum(t.numel for t in encoder.list_parameters() if t.kind is not ParamKind.LAF)


def audit(encoder: EcapaEncoder, specs: Sequence[NamedSpec]) -> AuditReport:
    total = base_param_count(encoder)
    rows = []
    for named in specs:
        tunable = spec_param_count(encoder, named.spec)
        rows.append(
            AuditRow(
                label=named.label,
                selector=named.spec.describe(),
                tunable=tunable,
                percent=round(100.0 * tunable / total, 4),
                reference_k=named.reference_k,
                note=named.note,
            )
        )
    return AuditReport(rows=rows, total_params=total)


AUDIT_COLUMNS = ("label", "selector", "tunable", "tunable_k", "percent", "reference_k", "note")


def write_audit_csv(report: AuditReport, path: Union[str, Path]) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(AUDIT_COLUMNS)
        for r in report.rows:
            writer.writerow([
                r.label,
                r.selector,
                r.tunable,
                f"{r.tunable / 1000:.1f}",
                f"{r.percent:.4f}",
                "" if r.reference_k is None else f"{r.reference_k:g}",
                r.note,
            ])


def write_audit_json(report: AuditReport, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(report.model_dump(), indent=2, sort_keys=True) + "\n")


# ============================================================
# REFERENCE CATALOGUE
# ============================================================

_BN_ALL = frozenset(ALL_GROUPS)
_FW = dict(bn_groups=_BN_ALL, se_groups=frozenset({G.G3}))
_G5_NOTE = "G5 site counted as d*a+a; the reference count implies about 0.1 K for it"


def _tcfm(sites: Iterable[LayerGroupId], fw: bool = True) -> AdapterSpec:
    extra = _FW if fw else {}
    return AdapterSpec(tcfm_sites=frozenset(sites), conditioning=ConditioningMode.TCFM, **extra)


def reference_catalogue() -> list[NamedSpec]:
    """
    Selector rows with their reference counts (in thousands),
    ordered as they are usually tabulated: whole-model baselines, BN
    and SE selections, then text-conditioned sites on top of the
    SE G3 & BN adapter.
    """
    rows = [
        NamedSpec(label="PT", spec=AdapterSpec(), reference_k=0.0),
        NamedSpec(
            label="FT",
            spec=AdapterSpec(train_all=True, classifier=ClassifierMode.LEARNED_FC),
            reference_k=2210.0,
        ),
        NamedSpec(label="FT clf", spec=AdapterSpec(classifier=ClassifierMode.LEARNED_FC), reference_k=0.5),
    ]
    for group, ref in ((G.G0, 0.5), (G.G1, 1.5), (G.G2, 1.5), (G.G3, 1.5), (G.G5, 3.1), (G.G6, 1.0)):
        rows.append(NamedSpec(label=f"BN {group.value}", spec=AdapterSpec(bn_groups={group}), reference_k=ref))
    rows.append(NamedSpec(label="BN", spec=AdapterSpec(bn_groups=_BN_ALL), reference_k=9.0))
    for group in sorted(SE_GROUPS, key=lambda g: g.index):
        rows.append(
            NamedSpec(
                label=f"SE {group.value} & BN",
                spec=AdapterSpec(bn_groups=_BN_ALL, se_groups={group}),
                reference_k=41.8,
            )
        )
    rows.append(
        NamedSpec(
            label="SE & BN (FC clf)",
            spec=AdapterSpec(bn_groups=_BN_ALL, se_groups=SE_GROUPS, classifier=ClassifierMode.LEARNED_FC),
            reference_k=107.8,
        )
    )
    rows.append(
        NamedSpec(label="SE & BN", spec=AdapterSpec(bn_groups=_BN_ALL, se_groups=SE_GROUPS), reference_k=107.3)
    )
    for group, ref in ((G.G0, 44.9), (G.G1, 69.5), (G.G2, 69.5), (G.G3, 69.5), (G.G4, 44.9), (G.G5, 41.9)):
        rows.append(
            NamedSpec(
                label=f"TCFM {group.value} + FW",
                spec=_tcfm({group}),
                reference_k=ref,
                note=_G5_NOTE if group is G.G5 else "",
            )
        )
    rows.append(
        NamedSpec(label="TCFM G3,G4,G5 + FW", spec=_tcfm({G.G3, G.G4, G.G5}), reference_k=72.7, note=_G5_NOTE)
    )
    rows.append(NamedSpec(label="TCFM G4,G5 + FW", spec=_tcfm({G.G4, G.G5}), reference_k=45.0, note=_G5_NOTE))
    rows.append(NamedSpec(label="TCFM G4,G5", spec=_tcfm({G.G4, G.G5}, fw=False), reference_k=3.2, note=_G5_NOTE))
    return rows
