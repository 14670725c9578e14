"""
Checkpoint container.

One torch.save file per model:

    {
        "format_version": 1,
        "kind": "pair" | "detector" | "snapshot",
        "encoder_config": {...},          # EncoderConfig as JSON-able dict
        "text_config": {...},             # pair only
        "groups": {name: "G0".."G6"},     # acoustic parameter -> layer group
        "tensors": {"acoustic/...": Tensor, "text/...": Tensor,
                    "head/...": Tensor, "kam/...": Tensor, "te": Tensor},
        "metadata": {...},
    }

Tensors are stored as-is, so a save/load round trip is bitwise.
Loading uses weights_only=True.
"""

from pathlib import Path
from typing import Any, Optional, Union

import torch
from torch import Tensor

from takws.core.errors import ConfigError, IncompatibleSnapshotError
from takws.core.logging import get_logger
from takws.models.schemas import EncoderConfig, LayerGroupId, TextEncoderConfig
from takws.networks.detector import KeywordDetector, ModelPair
from takws.networks.encoder import EcapaEncoder, build_encoder
from takws.networks.text_encoder import build_text_encoder, freeze
from takws.services.adaptation import ParamSnapshot

logger = get_logger(__name__)

FORMAT_VERSION = 1

PathLike = Union[str, Path]


def _prefixed(prefix: str, state: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}/{k}": v.detach().cpu().clone() for k, v in state.items()}


def _unprefixed(prefix: str, tensors: dict[str, Tensor]) -> dict[str, Tensor]:
    head = f"{prefix}/"
    return {k[len(head):]: v for k, v in tensors.items() if k.startswith(head)}


def _group_map(encoder: EcapaEncoder) -> dict[str, str]:
    return {t.name: t.group.value for t in encoder.list_parameters()}


def _write(payload: dict[str, Any], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    logger.info("checkpoint_saved", path=str(path), kind=payload["kind"], tensors=len(payload["tensors"]))
    return path


def _read(path: PathLike, kind: str) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise IncompatibleSnapshotError(f"{path} is not a readable checkpoint: {e}") from e
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise IncompatibleSnapshotError(f"{path}: unsupported checkpoint format")
    if payload.get("kind") != kind:
        raise IncompatibleSnapshotError(f"{path} holds a {payload.get('kind')!r} checkpoint, expected {kind!r}")
    return payload


def _load_state(module: torch.nn.Module, state: dict[str, Tensor], what: str) -> None:
    own = module.state_dict()
    if set(own) != set(state):
        missing = sorted(set(own) - set(state))[:3]
        extra = sorted(set(state) - set(own))[:3]
        raise IncompatibleSnapshotError(f"{what}: missing {missing}, unexpected {extra}")
    for name, value in state.items():
        if own[name].shape != value.shape:
            raise IncompatibleSnapshotError(
                f"{what}: {name} has shape {tuple(value.shape)}, model expects {tuple(own[name].shape)}"
            )
    module.load_state_dict(state, strict=True)


# ============================================================
# MODEL PAIRS
# ============================================================

def save_pair(pair: ModelPair, path: PathLike, metadata: Optional[dict[str, Any]] = None) -> Path:
    return _write(
        {
            "format_version": FORMAT_VERSION,
            "kind": "pair",
            "encoder_config": pair.encoder.config.model_dump(mode="json"),
            "text_config": pair.text.config.model_dump(mode="json"),
            "groups": _group_map(pair.encoder),
            "tensors": {
                **_prefixed("acoustic", pair.encoder.state_dict()),
                **_prefixed("text", pair.text.encoder.state_dict()),
            },
            "metadata": metadata or {},
        },
        path,
    )


def load_pair(path: PathLike) -> ModelPair:
    payload = _read(path, "pair")
    encoder = build_encoder(EncoderConfig.model_validate(payload["encoder_config"]))
    _load_state(encoder, _unprefixed("acoustic", payload["tensors"]), "acoustic encoder")
    text = build_text_encoder(TextEncoderConfig.model_validate(payload["text_config"]))
    _load_state(text, _unprefixed("text", payload["tensors"]), "text encoder")
    encoder.eval()
    return ModelPair(encoder, freeze(text))


# ============================================================
# ADAPTED DETECTORS
# ============================================================

def save_detector(detector: KeywordDetector, path: PathLike, metadata: Optional[dict[str, Any]] = None) -> Path:
    """
    Metadata should name at least the keyword; site groups, head kind
    and KAM presence are recorded automatically.
    """
    sites = sorted({s.group.value for s in detector.encoder.activation_sites() if s.active})
    tensors = {
        **_prefixed("acoustic", detector.encoder.state_dict()),
        "te": detector.te.detach().cpu().clone(),
    }
    if detector.head is not None:
        tensors.update(_prefixed("head", detector.head.state_dict()))
    if detector.kam is not None:
        tensors.update(_prefixed("kam", detector.kam.state_dict()))
    return _write(
        {
            "format_version": FORMAT_VERSION,
            "kind": "detector",
            "encoder_config": detector.encoder.config.model_dump(mode="json"),
            "groups": _group_map(detector.encoder),
            "tensors": tensors,
            "metadata": {
                **(metadata or {}),
                "sites": sites,
                "head": detector.head_kind.value,
                "kam": detector.kam is not None,
            },
        },
        path,
    )


def load_detector(path: PathLike) -> tuple[KeywordDetector, dict[str, Any]]:
    payload = _read(path, "detector")
    meta = payload["metadata"]
    encoder = build_encoder(EncoderConfig.model_validate(payload["encoder_config"]))
    if meta["sites"]:
        encoder.set_activation_sites([LayerGroupId(g) for g in meta["sites"]])
    tensors = payload["tensors"]
    detector = KeywordDetector(encoder, tensors["te"], head=meta["head"], use_kam=meta["kam"])
    _load_state(encoder, _unprefixed("acoustic", tensors), "acoustic encoder")
    if detector.head is not None:
        _load_state(detector.head, _unprefixed("head", tensors), "head")
    if detector.kam is not None:
        _load_state(detector.kam, _unprefixed("kam", tensors), "kam")
    detector.eval()
    detector.requires_grad_(False)
    return detector, meta


# ============================================================
# SNAPSHOTS
# ============================================================

def save_snapshot(snap: ParamSnapshot, path: PathLike) -> Path:
    return _write(
        {
            "format_version": FORMAT_VERSION,
            "kind": "snapshot",
            "checksum": snap.checksum,
            "tensors": {k: v.detach().cpu().clone() for k, v in snap.entries.items()},
            "metadata": {},
        },
        path,
    )


def load_snapshot(path: PathLike) -> ParamSnapshot:
    """Checksum is carried over, so corruption surfaces on restore()."""
    payload = _read(path, "snapshot")
    return ParamSnapshot(entries=dict(payload["tensors"]), checksum=payload["checksum"])
