"""
Text-conditioned feature modulation.

A learnable activation (LAF) mixes a fixed basis of activations with
weights predicted from the keyword's text embedding:

    s = softmax(TE . w + b),   y = sum_i s_i * A_i(h)

AdaIN conditioning is kept alongside it as the baseline: instance
normalized features scaled and shifted by a linear projection of TE.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from takws.core.errors import ConfigError, ShapeError


def hard_sigmoid(x: Tensor) -> Tensor:
    """clip(x / 6 + 0.5, 0, 1)"""
    return F.hardsigmoid(x)


@dataclass(frozen=True)
class ActivationBasis:
    """Ordered, fixed set of scalar activations A_1..A_a."""
    names: tuple[str, ...]
    functions: tuple[Callable[[Tensor], Tensor], ...]

    def __len__(self) -> int:
        return len(self.functions)

    def evaluate(self, h: Tensor) -> Tensor:
        """Stack every basis function applied to h along a new leading axis."""
        return torch.stack([fn(h) for fn in self.functions], dim=0)


# ELU uses alpha = 1; softplus is the identity above 20.
DEFAULT_BASIS = ActivationBasis(
    names=("elu", "hard_sigmoid", "relu", "softplus", "swish", "tanh"),
    functions=(F.elu, hard_sigmoid, F.relu, F.softplus, F.silu, torch.tanh),
)

# Bias on the ReLU logit for sites installed before adaptation: with six
# basis functions the ReLU weight starts at e^3 / (e^3 + 5), about 0.8.
LAF_RELU_LOGIT = 3.0


def laf_apply(h: Tensor, s: Tensor, basis: ActivationBasis = DEFAULT_BASIS) -> Tensor:
    """
    Mix the basis activations of h with weights s.

    s is either (a,) and shared by every element of h, or (B, a) with
    one weight vector per leading batch entry of h.
    """
    stacked = basis.evaluate(h)
    if s.dim() == 1:
        weights = s.reshape(-1, *([1] * h.dim()))
    else:
        weights = s.transpose(0, 1).reshape(s.shape[1], s.shape[0], *([1] * (h.dim() - 1)))
    return (stacked * weights).sum(dim=0)


class ConditioningContext:
    """
    Text embedding plus a cache of per-site activation weights.

    Weights are keyed by the site and the version counters of its w and
    b tensors, so an optimizer step invalidates them. Entries computed
    with autograd enabled only live for one forward pass.
    """

    def __init__(self, te: Tensor):
        if te.dim() not in (1, 2):
            raise ShapeError(f"text embedding must be (d,) or (B, d), got {tuple(te.shape)}")
        self.te = te
        self._cache: dict[int, tuple[tuple[int, int], Tensor]] = {}

    def new_pass(self) -> None:
        if torch.is_grad_enabled():
            self._cache.clear()

    def weights_for(self, site: "LearnableActivation") -> Tensor:
        key = (site.w._version, site.b._version)
        hit = self._cache.get(id(site))
        if hit is not None and hit[0] == key:
            return hit[1]
        s = laf_weights(self.te, site)
        self._cache[id(site)] = (key, s)
        return s


class LearnableActivation(nn.Module):
    """
    LAF site: w (d x a) and b (a,).

    w starts at zero. With relu_logit = 0 b is zero too and the activation
    is the uniform mixture of the basis; a positive relu_logit starts the
    site close to the ReLU it replaces (see laf_init).
    """

    def __init__(self, embed_dim: int, basis: ActivationBasis = DEFAULT_BASIS, relu_logit: float = 0.0):
        super().__init__()
        self.basis = basis
        self.w = nn.Parameter(torch.zeros(embed_dim, len(basis)))
        self.b = nn.Parameter(torch.zeros(len(basis)))
        laf_init(self, relu_logit)

    @property
    def embed_dim(self) -> int:
        return self.w.shape[0]

    def forward(self, h: Tensor, ctx: ConditioningContext) -> Tensor:
        return laf_apply(h, ctx.weights_for(self), self.basis)


def laf_init(site: LearnableActivation, relu_logit: float = LAF_RELU_LOGIT) -> None:
    """
    Reset a site: w = 0 and b = relu_logit at the ReLU index, 0 elsewhere.

    relu_logit = 0 gives the uniform mixture. Raises ConfigError for a
    nonzero relu_logit when the basis has no ReLU.
    """
    with torch.no_grad():
        site.w.zero_()
        site.b.zero_()
        if relu_logit:
            if "relu" not in site.basis.names:
                raise ConfigError("relu_logit needs a basis that contains relu")
            site.b[site.basis.names.index("relu")] = relu_logit


def laf_weights(te: Tensor, site: LearnableActivation) -> Tensor:
    """s = softmax(TE . w + b) over the basis axis."""
    if te.shape[-1] != site.w.shape[0]:
        raise ShapeError(
            f"text embedding has d={te.shape[-1]} but site expects d={site.w.shape[0]}"
        )
    return torch.softmax(te.to(site.w.dtype) @ site.w + site.b, dim=-1)


def laf_normalized_profile(
    site: LearnableActivation,
    te: Tensor,
    grid: Sequence[float],
) -> list[tuple[float, float]]:
    """
    LAF output minus the plain average of the basis on each grid point.

    A uniform mixture therefore yields an identically zero profile.
    """
    if len(grid) == 0:
        raise ConfigError("profile grid must not be empty")
    if any(x < -3.0 or x > 3.0 for x in grid):
        raise ConfigError("profile grid must lie within [-3, 3]")
    with torch.no_grad():
        h = torch.tensor(list(grid), dtype=site.w.dtype, device=site.w.device)
        s = laf_weights(te.reshape(-1), site)
        y = laf_apply(h, s, site.basis) - site.basis.evaluate(h).mean(dim=0)
    return list(zip([float(x) for x in grid], y.tolist()))


def profile_grid(points: int = 121, limit: float = 3.0) -> list[float]:
    return torch.linspace(-limit, limit, points, dtype=torch.float64).tolist()


class AdaIN(nn.Module):
    """
    Adaptive instance normalization driven by a text embedding.

    gamma and beta come from one linear projection TE -> 2f; features
    are normalized per channel over time with eps 1e-5.
    """

    eps = 1e-5

    def __init__(self, embed_dim: int, channels: int, bias: bool = False):
        super().__init__()
        self.channels = channels
        self.projection = nn.Linear(embed_dim, 2 * channels, bias=bias)

    def forward(self, h: Tensor, te: Tensor) -> Tensor:
        if h.shape[1] != self.channels:
            raise ShapeError(f"AdaIN expects {self.channels} channels, got {h.shape[1]}")
        mean = h.mean(dim=-1, keepdim=True)
        var = h.var(dim=-1, unbiased=False, keepdim=True)
        normed = (h - mean) / torch.sqrt(var + self.eps)
        gamma, beta = self.projection(te.to(h.dtype)).chunk(2, dim=-1)
        if gamma.dim() == 1:
            gamma, beta = gamma[None, :, None], beta[None, :, None]
        else:
            gamma, beta = gamma[:, :, None], beta[:, :, None]
        return gamma * normed + beta


def adain_apply(h: Tensor, te: Tensor, site: AdaIN) -> Tensor:
    return site(h, te)


class KeywordAdaptiveModule(nn.Module):
    """
    Residual AdaIN block for the KAM baseline: h + AdaIN(h | TE).

    The projection starts at zero so inserting the module leaves the
    pre-trained encoder output unchanged.
    """

    def __init__(self, embed_dim: int, channels: int):
        super().__init__()
        self.adain = AdaIN(embed_dim, channels, bias=True)
        nn.init.zeros_(self.adain.projection.weight)
        nn.init.zeros_(self.adain.projection.bias)

    def forward(self, h: Tensor, te: Tensor) -> Tensor:
        return h + self.adain(h, te)


class ConditioningKind(str, Enum):
    TCFM = "TCFM"
    ADAIN = "ADAIN"


@dataclass(frozen=True)
class ConditioningParamCount:
    weights: int
    biases: int

    @property
    def total(self) -> int:
        return self.weights + self.biases


def conditioning_param_count(
    kind: ConditioningKind,
    d: int,
    f: Optional[int] = None,
    a: Optional[int] = None,
    adain_bias: bool = False,
) -> ConditioningParamCount:
    """
    Tunable parameters added by one conditioning site.

    TCFM: d*a weights plus a biases. AdaIN: d*2*f weights (plus 2f
    biases when the projection carries a bias).
    """
    kind = ConditioningKind(kind)
    if d < 1:
        raise ConfigError("d must be positive")
    if kind is ConditioningKind.TCFM:
        if a is None or a < 1:
            raise ConfigError("TCFM count needs a positive basis size a")
        return ConditioningParamCount(weights=d * a, biases=a)
    if f is None or f < 1:
        raise ConfigError("AdaIN count needs a positive channel count f")
    return ConditioningParamCount(weights=d * 2 * f, biases=2 * f if adain_bias else 0)
