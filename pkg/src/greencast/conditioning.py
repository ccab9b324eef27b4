"""Weather-conditioning layers (concatenation, feature-wise modulation,
cross-attention) and the fusion-location policy that routes them into a
backbone.

All layers operate pixelwise on feature maps ``x`` of shape [B, d, H, W]
with conditioning tokens ``c`` of shape [B, n_tokens, n_feat] (one token per
weather variable), preserve the feature width and spatial dims, and share
the weather tokens across all pixels of a sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractViolationError

METHODS = ("cat", "film", "xattn", "none")
LOCATIONS = ("early", "latent", "all")
STAGES = ("input", "post-encoder", "pre-decoder", "every-block")

#: which stages each fusion-location policy activates
LOCATION_POLICY = {
    "early": frozenset({"input"}),
    "latent": frozenset({"post-encoder", "pre-decoder"}),
    "all": frozenset(STAGES),
}


@dataclass
class ConditioningConfig:
    method: str = "none"
    location: str = "latent"
    hidden: int = 16
    heads: int = 4
    per_step: bool = True  # one token set per timestep vs whole target window

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ContractViolationError(f"unknown conditioning method {self.method!r}")
        if self.location not in LOCATIONS:
            raise ContractViolationError(f"unknown fusion location {self.location!r}")
        if self.hidden < 1 or self.heads < 1:
            raise ContractViolationError("hidden width and heads must be positive")


class ChannelNorm(nn.Module):
    """Normalization over the channel dimension, per pixel, without affine
    parameters (shape-agnostic stand-in for a layer norm on feature maps)."""

    def __init__(self, eps: float = 1e-5):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + self.eps)


def _flatten_tokens(c: torch.Tensor) -> torch.Tensor:
    if c.dim() != 3:
        raise ContractViolationError("conditioning tokens must be [B, n_tokens, n_feat]")
    return c.reshape(c.shape[0], -1)


class ConcatConditioner(nn.Module):
    """Concatenate the flattened weather with each pixel's features and
    project back to the feature width (a 1x1 convolution)."""

    def __init__(self, width: int, n_tokens: int, n_feat: int):
        super().__init__()
        self.width = width
        self.n_cond = n_tokens * n_feat
        self.proj = nn.Conv2d(width + self.n_cond, width, 1)

    def forward(self, x, c):
        if x.shape[1] != self.width:
            raise ContractViolationError(
                f"feature width {x.shape[1]} != configured {self.width}"
            )
        flat = _flatten_tokens(c)
        if flat.shape[1] != self.n_cond:
            raise ContractViolationError(
                f"conditioning width {flat.shape[1]} != configured {self.n_cond}"
            )
        maps = flat[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        return self.proj(torch.cat([x, maps], dim=1))


class _ZeroFinalMlp(nn.Module):
    """Two-layer MLP whose final layer starts at zero, so the host layer is
    an exact identity at initialization."""

    def __init__(self, n_in: int, hidden: int, n_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(n_in, hidden), nn.LeakyReLU(), nn.Linear(hidden, n_out)
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, c):
        return self.net(c)


class FilmConditioner(nn.Module):
    """Residual feature-wise linear modulation:

        x_out = x + leaky_relu(gamma(c) * N(f(x)) + beta(c))

    with f a 1x1 convolution, N a channelwise normalization and gamma/beta
    small MLPs over the flattened weather, zero-initialized so the layer
    starts as an exact identity.
    """

    def __init__(self, width: int, n_tokens: int, n_feat: int, hidden: int = 16):
        super().__init__()
        self.width = width
        self.f = nn.Conv2d(width, width, 1)
        self.norm = ChannelNorm()
        self.gamma = _ZeroFinalMlp(n_tokens * n_feat, hidden, width)
        self.beta = _ZeroFinalMlp(n_tokens * n_feat, hidden, width)

    def forward(self, x, c):
        flat = _flatten_tokens(c)
        g = self.gamma(flat)[:, :, None, None]
        b = self.beta(flat)[:, :, None, None]
        return x + F.leaky_relu(g * self.norm(self.f(x)) + b)


class CrossAttnConditioner(nn.Module):
    """Pixelwise multi-head cross-attention onto the weather tokens:

        x_out = x + f(N(MHA(Q(x), K(c), V(c))))

    Each pixel's feature vector is the single query token; each weather
    variable is one key/value token. Heads are concatenated without an extra
    output projection (f plays that role) and f is zero-initialized so the
    layer starts as an exact identity.
    """

    def __init__(self, width: int, n_tokens: int, n_feat: int, heads: int = 4):
        super().__init__()
        if width % heads != 0:
            raise ContractViolationError(
                f"{heads} heads do not divide feature width {width}"
            )
        self.width = width
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(n_feat, width)
        self.v = nn.Linear(n_feat, width)
        self.norm = nn.LayerNorm(width, elementwise_affine=False)
        self.f = nn.Linear(width, width)
        nn.init.zeros_(self.f.weight)
        nn.init.zeros_(self.f.bias)

    def attend(self, xf: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """Multi-head attention for queries [B, P, d] over tokens [B, n, f]."""
        b, p, d = xf.shape
        n = c.shape[1]
        dh = d // self.heads
        q = self.q(xf).view(b, p, self.heads, dh).transpose(1, 2)
        k = self.k(c).view(b, n, self.heads, dh).transpose(1, 2)
        v = self.v(c).view(b, n, self.heads, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, p, d)
        return out

    def forward(self, x, c):
        if x.shape[1] != self.width:
            raise ContractViolationError(
                f"feature width {x.shape[1]} != configured {self.width}"
            )
        b, d, h, w = x.shape
        xf = x.flatten(2).transpose(1, 2)  # [B, P, d]
        out = self.attend(xf, c)
        xf = xf + self.f(self.norm(out))
        return xf.transpose(1, 2).reshape(b, d, h, w)


def build_conditioner(config: ConditioningConfig, width: int, n_tokens: int,
                      n_feat: int) -> nn.Module | None:
    """Instantiate the configured conditioning layer for one fusion site."""
    config.validate()
    if config.method == "none":
        return None
    if config.method == "cat":
        return ConcatConditioner(width, n_tokens, n_feat)
    if config.method == "film":
        return FilmConditioner(width, n_tokens, n_feat, hidden=config.hidden)
    return CrossAttnConditioner(width, n_tokens, n_feat, heads=config.heads)


def fuse(stage: str, x: torch.Tensor, c: torch.Tensor | None,
         conditioner: nn.Module | None, config: ConditioningConfig) -> torch.Tensor:
    """Apply the conditioner iff the stage matches the location policy."""
    if stage not in STAGES:
        raise ContractViolationError(f"unknown backbone stage {stage!r}")
    if conditioner is None or c is None or config.method == "none":
        return x
    if stage in LOCATION_POLICY[config.location]:
        return conditioner(x, c)
    return x
