"""
Keyword detector: acoustic encoder plus a detection head.

Head kinds:
- te:       logit = TE . AE, TE fixed (the TE classifier)
- fc:       logit = theta . AE + bias, theta learned
- softmax2: two-way softmax (target vs rest)
- softmax3: three-way softmax (non-target, target, noise)

Class indices follow UtteranceClass, so the target posterior of a
softmax head is always column 1.
"""

from enum import Enum
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from takws.core.errors import ConfigError, ShapeError
from takws.models.schemas import UtteranceClass
from takws.networks.conditioning import ConditioningContext, KeywordAdaptiveModule
from takws.networks.encoder import EcapaEncoder
from takws.networks.text_encoder import FrozenTextEncoder
from takws.services.scoring import bce_loss, keyword_probability


class HeadKind(str, Enum):
    TE = "te"
    FC = "fc"
    SOFTMAX2 = "softmax2"
    SOFTMAX3 = "softmax3"

    @property
    def n_outputs(self) -> int:
        return {"te": 1, "fc": 1, "softmax2": 2, "softmax3": 3}[self.value]

    @property
    def is_binary(self) -> bool:
        return self in (HeadKind.TE, HeadKind.FC)


class KeywordDetector(nn.Module):
    def __init__(
        self,
        encoder: EcapaEncoder,
        te: Tensor,
        head: HeadKind = HeadKind.TE,
        head_init: str = "te",
        use_kam: bool = False,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if te.dim() != 1 or te.shape[0] != encoder.embed_dim:
            raise ShapeError(
                f"text embedding must be ({encoder.embed_dim},), got {tuple(te.shape)}"
            )
        if head_init not in ("te", "scratch"):
            raise ConfigError(f"head_init must be 'te' or 'scratch', got {head_init!r}")
        self.encoder = encoder
        self.head_kind = HeadKind(head)
        ref = next(encoder.parameters())
        self.register_buffer("te", te.detach().clone().to(ref.device, ref.dtype))

        self.head: Optional[nn.Linear] = None
        if self.head_kind is not HeadKind.TE:
            self.head = nn.Linear(encoder.embed_dim, self.head_kind.n_outputs).to(
                ref.device, ref.dtype
            )
            self._init_head(head_init, generator)

        self.kam: Optional[KeywordAdaptiveModule] = None
        if use_kam:
            self.kam = KeywordAdaptiveModule(encoder.embed_dim, encoder.frame_channels).to(
                ref.device, ref.dtype
            )

        self._ctx: Optional[ConditioningContext] = None

    def _init_head(self, head_init: str, generator: Optional[torch.Generator]) -> None:
        with torch.no_grad():
            if head_init == "te" and self.head_kind is HeadKind.FC:
                self.head.weight.copy_(self.te.unsqueeze(0))
                self.head.bias.zero_()
                return
            bound = 1.0 / self.encoder.embed_dim ** 0.5
            self.head.weight.copy_(
                torch.empty(self.head.weight.shape).uniform_(-bound, bound, generator=generator)
            )
            self.head.bias.zero_()

    @property
    def conditioning(self) -> Optional[ConditioningContext]:
        if not self.encoder.has_conditioning():
            return None
        if self._ctx is None:
            self._ctx = ConditioningContext(self.te)
        return self._ctx

    def embed(self, features: Tensor) -> Tensor:
        """Acoustic embeddings (B, d), conditioned on this detector's keyword."""
        if features.dim() == 2:
            features = features.unsqueeze(0)
        ctx = self.conditioning
        if self.kam is None:
            return self.encoder(features, ctx)
        frames = self.encoder.embed_frames(features, ctx)
        te = self.te.unsqueeze(0).expand(frames.shape[0], -1)
        return self.encoder.pool_embed(self.kam(frames, te), ctx)

    def forward(self, features: Tensor) -> Tensor:
        """Logits: (B,) for binary heads, (B, n) for softmax heads."""
        ae = self.embed(features)
        if self.head_kind is HeadKind.TE:
            return ae @ self.te
        logits = self.head(ae)
        return logits.squeeze(-1) if self.head_kind is HeadKind.FC else logits

    def detection_score(self, features: Tensor) -> Tensor:
        """Probability that each utterance contains the keyword, shape (B,)."""
        logits = self(features)
        if self.head_kind.is_binary:
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=-1)[:, UtteranceClass.TARGET]

    def loss(self, features: Tensor, classes: Tensor) -> Tensor:
        """
        Mean training loss for a batch labeled with UtteranceClass values.

        Binary heads use clamped BCE with noise as a negative; the
        two-class head folds noise into non-target; the three-class head
        keeps it as its own class.
        """
        target = classes == UtteranceClass.TARGET
        if self.head_kind is HeadKind.TE:
            return bce_loss(keyword_probability(self.embed(features), self.te), target)
        logits = self(features)
        if self.head_kind is HeadKind.FC:
            return bce_loss(torch.sigmoid(logits), target)
        if self.head_kind is HeadKind.SOFTMAX2:
            classes = target.long()
        return F.cross_entropy(logits, classes.long())


class ModelPair:
    """Pre-trained acoustic encoder with its frozen text encoder."""

    def __init__(self, encoder: EcapaEncoder, text: FrozenTextEncoder):
        if encoder.embed_dim != text.embed_dim:
            raise ConfigError(
                f"acoustic d={encoder.embed_dim} and text d={text.embed_dim} differ"
            )
        self.encoder = encoder
        self.text = text

    def te(self, keyword: str) -> Tensor:
        ref = next(self.encoder.parameters())
        return self.text.encode_text(keyword).to(ref.device, ref.dtype)
