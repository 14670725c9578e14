"""
Compact ECAPA-TDNN acoustic encoder with a layer-group taxonomy.

Layout (C = channels, d = embed_dim):

    G0  stem conv(k=5) -> act -> BN                         C
    G1  SE-Res2Block(dilation 2)                            C
    G2  SE-Res2Block(dilation 3)                            C
    G3  SE-Res2Block(dilation 4)                            C
    G4  concat(G1..G3) -> 1x1 conv -> act                   3C
    G5  attentive statistics pooling -> BN                  6C
    G6  FC -> BN -> L2 normalize                            d

Each SE-Res2Block is conv1x1 -> act -> BN, (scale - 1) dilated
convs -> act -> BN, conv1x1 -> act -> BN, then a bias-free SE module,
with a residual connection. Every "act" is an ActivationSite: ReLU by
default, replaceable by a text-conditioned LearnableActivation.
"""

from typing import Iterable, Optional, Union

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from torch import Tensor, nn

from takws.core.errors import ConfigError, MissingConditioningError, ShapeError
from takws.models.schemas import EncoderConfig, LayerGroupId, ParamKind
from takws.networks.conditioning import (
    DEFAULT_BASIS,
    ActivationBasis,
    ConditioningContext,
    LearnableActivation,
)

Conditioning = Union[Tensor, ConditioningContext, None]


class TaggedParameter(BaseModel):
    """One encoder parameter with its layer group and kind."""
    model_config = ConfigDict(frozen=True)

    name: str
    group: LayerGroupId
    kind: ParamKind
    shape: tuple[int, ...]

    @property
    def numel(self) -> int:
        n = 1
        for dim in self.shape:
            n *= dim
        return n


class ActivationSite(nn.Module):
    """ReLU unless a LearnableActivation is installed."""

    def __init__(self, group: LayerGroupId, index: int):
        super().__init__()
        self.group = group
        self.index = index
        self.laf: Optional[LearnableActivation] = None

    @property
    def active(self) -> bool:
        return self.laf is not None

    def forward(self, x: Tensor, ctx: Optional[ConditioningContext]) -> Tensor:
        if self.laf is None:
            return F.relu(x)
        if ctx is None:
            raise MissingConditioningError(
                f"learnable activation at {self.group.value}/{self.index} needs a text embedding"
            )
        return self.laf(x, ctx)


class TDNNBlock(nn.Module):
    """conv -> activation site -> optional BN"""

    def __init__(self, in_channels, out_channels, kernel_size, dilation, site, norm=True):
        super().__init__()
        self.conv = nn.Conv1d(
            in_channels, out_channels, kernel_size, dilation=dilation, padding="same"
        )
        self.act = site
        self.norm = nn.BatchNorm1d(out_channels) if norm else None

    def forward(self, x: Tensor, ctx: Optional[ConditioningContext]) -> Tensor:
        x = self.act(self.conv(x), ctx)
        return self.norm(x) if self.norm is not None else x


class Res2NetBlock(nn.Module):
    """Hierarchical split convolution; the first split passes through."""

    def __init__(self, channels, scale, kernel_size, dilation, sites):
        super().__init__()
        width = channels // scale
        self.scale = scale
        self.blocks = nn.ModuleList(
            [TDNNBlock(width, width, kernel_size, dilation, site) for site in sites]
        )

    def forward(self, x: Tensor, ctx: Optional[ConditioningContext]) -> Tensor:
        y = []
        for i, x_i in enumerate(torch.chunk(x, self.scale, dim=1)):
            if i == 0:
                y_i = x_i
            elif i == 1:
                y_i = self.blocks[i - 1](x_i, ctx)
            else:
                y_i = self.blocks[i - 1](x_i + y_i, ctx)
            y.append(y_i)
        return torch.cat(y, dim=1)


class SEBlock(nn.Module):
    """Squeeze-and-excitation over time-averaged channels, no biases."""

    def __init__(self, channels: int, se_channels: int):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, se_channels, 1, bias=False)
        self.relu = nn.ReLU()
        self.conv2 = nn.Conv1d(se_channels, channels, 1, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        s = x.mean(dim=2, keepdim=True)
        s = torch.sigmoid(self.conv2(self.relu(self.conv1(s))))
        return s * x


class SERes2Block(nn.Module):
    def __init__(self, channels, scale, se_channels, kernel_size, dilation, group):
        super().__init__()
        sites = [ActivationSite(group, i) for i in range(scale + 1)]
        self.tdnn1 = TDNNBlock(channels, channels, 1, 1, sites[0])
        self.res2net = Res2NetBlock(channels, scale, kernel_size, dilation, sites[1:scale])
        self.tdnn2 = TDNNBlock(channels, channels, 1, 1, sites[scale])
        self.se = SEBlock(channels, se_channels)

    def forward(self, x: Tensor, ctx: Optional[ConditioningContext]) -> Tensor:
        residual = x
        x = self.tdnn1(x, ctx)
        x = self.res2net(x, ctx)
        x = self.tdnn2(x, ctx)
        x = self.se(x)
        return x + residual


class AttentiveStatisticsPooling(nn.Module):
    """Attention-weighted mean and standard deviation over time."""

    eps = 1e-12

    def __init__(self, channels: int, attention_channels: int, site: ActivationSite):
        super().__init__()
        self.attn_in = nn.Conv1d(channels, attention_channels, 1)
        self.act = site
        self.attn_out = nn.Conv1d(attention_channels, channels, 1)

    def forward(self, x: Tensor, ctx: Optional[ConditioningContext]) -> Tensor:
        attn = self.attn_out(torch.tanh(self.act(self.attn_in(x), ctx)))
        attn = torch.softmax(attn, dim=2)
        mean = (attn * x).sum(dim=2)
        std = torch.sqrt(((attn * (x - mean.unsqueeze(2)).pow(2)).sum(dim=2)).clamp(self.eps))
        return torch.cat((mean, std), dim=1)


def _group_of(name: str) -> LayerGroupId:
    head = name.split(".")[0]
    if head == "stem":
        return LayerGroupId.G0
    if head == "blocks":
        return LayerGroupId(f"G{int(name.split('.')[1]) + 1}")
    if head == "mfa":
        return LayerGroupId.G4
    if head in ("pool", "pool_bn"):
        return LayerGroupId.G5
    if head in ("fc", "fc_bn"):
        return LayerGroupId.G6
    raise ConfigError(f"parameter {name!r} belongs to no layer group")


def _kind_of(module_name: str, module: nn.Module) -> ParamKind:
    if isinstance(module, LearnableActivation):
        return ParamKind.LAF
    if isinstance(module, nn.BatchNorm1d):
        return ParamKind.BN
    if ".se." in f".{module_name}.":
        return ParamKind.SE
    if module_name.startswith("pool."):
        return ParamKind.ATTN
    if module_name == "fc":
        return ParamKind.FC
    return ParamKind.CONV


class EcapaEncoder(nn.Module):
    """
    Acoustic encoder producing unit-norm embeddings.

    Input features are (B, T, n_mels) or (T, n_mels); output is (B, d)
    or (d,). The text embedding passed as `cond` is only consumed by
    installed learnable activations.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config.channels
        self.stem = TDNNBlock(
            config.n_mels, c, config.stem_kernel, 1, ActivationSite(LayerGroupId.G0, 0)
        )
        self.blocks = nn.ModuleList(
            [
                SERes2Block(
                    c,
                    config.res2_scale,
                    config.se_channels,
                    config.res2_kernel,
                    dilation,
                    LayerGroupId(f"G{i + 1}"),
                )
                for i, dilation in enumerate(config.dilations)
            ]
        )
        agg = c * config.n_blocks
        self.mfa = TDNNBlock(agg, agg, 1, 1, ActivationSite(LayerGroupId.G4, 0), norm=False)
        self.pool = AttentiveStatisticsPooling(
            agg, config.attn_channels, ActivationSite(LayerGroupId.G5, 0)
        )
        self.pool_bn = nn.BatchNorm1d(2 * agg)
        self.fc = nn.Linear(2 * agg, config.embed_dim)
        self.fc_bn = nn.BatchNorm1d(config.embed_dim)
        self._tags: Optional[list[TaggedParameter]] = None

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    @property
    def frame_channels(self) -> int:
        return self.config.channels * self.config.n_blocks

    # ------------------------------------------------------------------
    # activation sites
    # ------------------------------------------------------------------

    def activation_sites(self, groups: Optional[Iterable[LayerGroupId]] = None) -> list[ActivationSite]:
        wanted = None if groups is None else set(groups)
        return [
            m for m in self.modules()
            if isinstance(m, ActivationSite) and (wanted is None or m.group in wanted)
        ]

    def site_count(self, group: LayerGroupId) -> int:
        return len(self.activation_sites([group]))

    def has_conditioning(self) -> bool:
        return any(site.active for site in self.activation_sites())

    def set_activation_sites(
        self,
        groups: Iterable[LayerGroupId],
        basis: ActivationBasis = DEFAULT_BASIS,
        relu_logit: float = 0.0,
    ) -> None:
        """Install fresh learnable activations at every site of the groups; uniform unless relu_logit is set."""
        ref = next(self.parameters())
        for site in self.activation_sites(groups):
            site.laf = LearnableActivation(self.embed_dim, basis, relu_logit).to(ref.device, ref.dtype)
        self._tags = None

    def clear_activation_sites(self) -> None:
        for site in self.activation_sites():
            site.laf = None
        self._tags = None

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def _context(self, cond: Conditioning) -> Optional[ConditioningContext]:
        if cond is None:
            if self.has_conditioning():
                raise MissingConditioningError(
                    "learnable activations are installed but no text embedding was given"
                )
            return None
        ctx = cond if isinstance(cond, ConditioningContext) else ConditioningContext(cond)
        if ctx.te.shape[-1] != self.embed_dim:
            raise ShapeError(
                f"text embedding has d={ctx.te.shape[-1]}, encoder expects {self.embed_dim}"
            )
        ctx.new_pass()
        return ctx

    def _check_features(self, features: Tensor) -> tuple[Tensor, bool]:
        single = features.dim() == 2
        if single:
            features = features.unsqueeze(0)
        if features.dim() != 3 or features.shape[-1] != self.config.n_mels:
            raise ShapeError(
                f"features must be (B, T, {self.config.n_mels}), got {tuple(features.shape)}"
            )
        if features.shape[1] < 1:
            raise ShapeError("feature sequence must hold at least one frame")
        if not torch.isfinite(features).all():
            raise ShapeError("features contain non-finite values")
        return features, single

    def embed_frames(self, features: Tensor, cond: Conditioning = None) -> Tensor:
        """Frame-level G4 output, shape (B, 3C, T)."""
        features, _ = self._check_features(features)
        return self._frames(features.transpose(1, 2), self._context(cond))

    def _frames(self, x: Tensor, ctx: Optional[ConditioningContext]) -> Tensor:
        x = self.stem(x, ctx)
        outputs = []
        for block in self.blocks:
            x = block(x, ctx)
            outputs.append(x)
        return self.mfa(torch.cat(outputs, dim=1), ctx)

    def pool_embed(self, frames: Tensor, cond: Conditioning = None) -> Tensor:
        """G5 and G6 on a frame-level map; returns unit-norm (B, d)."""
        return self._pool_embed(frames, self._context(cond))

    def _pool_embed(self, frames: Tensor, ctx: Optional[ConditioningContext]) -> Tensor:
        x = self.pool_bn(self.pool(frames, ctx))
        x = self.fc_bn(self.fc(x))
        return F.normalize(x, p=2, dim=-1)

    def forward(self, features: Tensor, cond: Conditioning = None) -> Tensor:
        features, single = self._check_features(features)
        ctx = self._context(cond)
        out = self._pool_embed(self._frames(features.transpose(1, 2), ctx), ctx)
        return out[0] if single else out

    # ------------------------------------------------------------------
    # parameter tags
    # ------------------------------------------------------------------

    def list_parameters(self) -> list[TaggedParameter]:
        """Every parameter with its group and kind, in registration order."""
        if self._tags is None:
            tags = []
            for module_name, module in self.named_modules():
                for pname, param in module.named_parameters(recurse=False):
                    name = f"{module_name}.{pname}" if module_name else pname
                    tags.append(
                        TaggedParameter(
                            name=name,
                            group=_group_of(name),
                            kind=_kind_of(module_name, module),
                            shape=tuple(param.shape),
                        )
                    )
            self._tags = tags
        return list(self._tags)

    def count_parameters(
        self,
        groups: Optional[Iterable[LayerGroupId]] = None,
        kinds: Optional[Iterable[ParamKind]] = None,
    ) -> int:
        """Scalar parameter count, optionally filtered by group and kind."""
        g = None if groups is None else set(groups)
        k = None if kinds is None else set(kinds)
        return sum(
            t.numel for t in self.list_parameters()
            if (g is None or t.group in g) and (k is None or t.kind in k)
        )


def build_encoder(config: Optional[EncoderConfig] = None) -> EcapaEncoder:
    return EcapaEncoder(config or EncoderConfig())
