"""
Character-level text encoder.

Keyword text is mapped to a unit-norm text embedding (TE) in the same
d-dimensional space as the acoustic embedding. During adaptation the
encoder is frozen; TE is extracted once per keyword.
"""

from typing import Sequence, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from takws.core.errors import ConfigError, FrozenParameterError, KeywordTextError
from takws.models.schemas import TextEncoderConfig

ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789 '-"
PAD_INDEX = 0

_CHAR_INDEX = {c: i + 1 for i, c in enumerate(ALPHABET)}


def tokenize(text: str) -> list[int]:
    """Map keyword text to alphabet indices; 0 is reserved for padding."""
    if not text:
        raise ConfigError("keyword text must not be empty")
    indices = []
    for char in text:
        index = _CHAR_INDEX.get(char)
        if index is None:
            raise KeywordTextError(text, char)
        indices.append(index)
    return indices


def pad_tokens(texts: Sequence[str]) -> Tensor:
    """(N, L) index matrix, right-padded with PAD_INDEX."""
    tokens = [tokenize(t) for t in texts]
    width = max(len(t) for t in tokens)
    out = torch.full((len(tokens), width), PAD_INDEX, dtype=torch.long)
    for row, t in enumerate(tokens):
        out[row, : len(t)] = torch.tensor(t, dtype=torch.long)
    return out


class TextEncoder(nn.Module):
    """embedding -> (conv + ReLU) x n_layers -> masked mean -> FC -> L2 normalize"""

    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(len(ALPHABET) + 1, config.char_dim, padding_idx=PAD_INDEX)
        layers = []
        in_dim = config.char_dim
        for _ in range(config.n_layers):
            layers.append(nn.Conv1d(in_dim, config.hidden, config.kernel_size, padding="same"))
            in_dim = config.hidden
        self.convs = nn.ModuleList(layers)
        self.fc = nn.Linear(config.hidden, config.embed_dim)

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def forward(self, tokens: Tensor) -> Tensor:
        mask = (tokens != PAD_INDEX).unsqueeze(1).to(self.fc.weight.dtype)
        x = self.embedding(tokens).transpose(1, 2)
        for conv in self.convs:
            # padded positions must not leak into neighbours
            x = F.relu(conv(x * mask))
        pooled = (x * mask).sum(dim=2) / mask.sum(dim=2).clamp(min=1.0)
        return F.normalize(self.fc(pooled), p=2, dim=-1)

    def encode_batch(self, texts: Sequence[str]) -> Tensor:
        device = self.fc.weight.device
        return self(pad_tokens(texts).to(device))

    def encode_text(self, text: str) -> Tensor:
        return self.encode_batch([text])[0]


class FrozenTextEncoder(nn.Module):
    """
    Immutable view of a trained TextEncoder.

    Parameters are detached from autograd, the module stays in eval
    mode, and any attempt to re-enable gradients raises.
    """

    def __init__(self, encoder: TextEncoder):
        super().__init__()
        encoder.eval()
        for param in encoder.parameters():
            param.requires_grad_(False)
        self.encoder = encoder
        self.train(False)

    @property
    def config(self) -> TextEncoderConfig:
        return self.encoder.config

    @property
    def embed_dim(self) -> int:
        return self.encoder.embed_dim

    def train(self, mode: bool = True) -> "FrozenTextEncoder":
        # always eval
        self.training = False
        self.encoder.eval()
        return self

    def requires_grad_(self, requires_grad: bool = True) -> "FrozenTextEncoder":
        if requires_grad:
            raise FrozenParameterError("text encoder is frozen; gradients cannot be enabled")
        return self

    def _check_frozen(self) -> None:
        thawed = [n for n, p in self.encoder.named_parameters() if p.requires_grad]
        if thawed:
            raise FrozenParameterError(f"text encoder parameters were unfrozen: {', '.join(thawed)}")

    def forward(self, tokens: Tensor) -> Tensor:
        self._check_frozen()
        with torch.no_grad():
            return self.encoder(tokens)

    def encode_batch(self, texts: Sequence[str]) -> Tensor:
        self._check_frozen()
        with torch.no_grad():
            return self.encoder.encode_batch(texts)

    def encode_text(self, text: str) -> Tensor:
        return self.encode_batch([text])[0]


AnyTextEncoder = Union[TextEncoder, FrozenTextEncoder]


def build_text_encoder(config: TextEncoderConfig | None = None) -> TextEncoder:
    return TextEncoder(config or TextEncoderConfig())


def freeze(encoder: AnyTextEncoder) -> FrozenTextEncoder:
    """Freeze a text encoder. Freezing an already frozen encoder returns it unchanged."""
    if isinstance(encoder, FrozenTextEncoder):
        return encoder
    return FrozenTextEncoder(encoder)


def encode_text(encoder: AnyTextEncoder, text: str) -> Tensor:
    """Unit-norm TE of shape (d,)."""
    return encoder.encode_text(text)
