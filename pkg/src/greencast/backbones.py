"""Spatio-temporal building blocks: PatchMerge encoder/decoder, ConvLSTM and
ST-LSTM cells, the gated spatiotemporal attention translator and a UNet.

Convolutions use zero padding and the framework default (uniform fan-in)
initialization; recurrent forget gates get a +1 bias. GroupNorm falls back
to the largest group count that divides the channel width.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import ConditioningConfig, fuse
from .errors import ContractViolationError


@dataclass
class EncoderDecoderConfig:
    hidden: int = 64
    kernel: int = 3
    down_factor: int = 4
    norm_groups: int = 16
    skip_connections: bool = True

    def validate(self) -> None:
        if self.down_factor < 1 or self.down_factor & (self.down_factor - 1):
            raise ContractViolationError("down_factor must be a power of two")
        if self.hidden < 1:
            raise ContractViolationError("hidden width must be positive")

    @property
    def n_stages(self) -> int:
        return self.down_factor.bit_length() - 1


def group_norm(channels: int, groups: int) -> nn.GroupNorm:
    g = min(groups, channels)
    while channels % g:
        g -= 1
    return nn.GroupNorm(g, channels)


def _check_divisible(x: torch.Tensor, factor: int) -> None:
    if x.shape[-2] % factor or x.shape[-1] % factor:
        raise ContractViolationError(
            f"spatial dims {tuple(x.shape[-2:])} not divisible by {factor}"
        )


class PatchMergeEncoder(nn.Module):
    """Spatial encoder: stem conv, then space-to-depth merges. Emits the
    latent map plus per-resolution skip tensors (finest first)."""

    def __init__(self, in_channels: int, config: EncoderDecoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        h, k, g = config.hidden, config.kernel, config.norm_groups
        self.stem = nn.Conv2d(in_channels, h, k, padding=k // 2)
        self.stages = nn.ModuleList()
        for _ in range(config.n_stages):
            self.stages.append(nn.Sequential(
                group_norm(h, g), nn.LeakyReLU(),
                nn.PixelUnshuffle(2),
                nn.Conv2d(4 * h, h, k, padding=k // 2),
            ))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        _check_divisible(x, self.config.down_factor)
        z = self.stem(x)
        skips = []
        for stage in self.stages:
            skips.append(z)
            z = stage(z)
        return z, skips


class PatchMergeDecoder(nn.Module):
    """Mirror of the encoder: depth-to-space upsampling with additive skips
    and a linear 1x1 read-out head."""

    def __init__(self, out_channels: int, config: EncoderDecoderConfig,
                 in_channels: int | None = None):
        super().__init__()
        config.validate()
        self.config = config
        h, k, g = config.hidden, config.kernel, config.norm_groups
        self.inlet = (nn.Conv2d(in_channels, h, 1)
                      if in_channels not in (None, h) else nn.Identity())
        self.stages = nn.ModuleList()
        for _ in range(config.n_stages):
            self.stages.append(nn.Sequential(
                nn.Conv2d(h, 4 * h, k, padding=k // 2),
                nn.PixelShuffle(2),
                group_norm(h, g), nn.LeakyReLU(),
            ))
        self.head = nn.Conv2d(h, out_channels, 1)

    def forward(self, z: torch.Tensor,
                skips: list[torch.Tensor] | None = None) -> torch.Tensor:
        z = self.inlet(z)
        for i, stage in enumerate(self.stages):
            z = stage(z)
            if self.config.skip_connections and skips:
                z = z + skips[-(i + 1)]
        return self.head(z)


class ConvLSTMCell(nn.Module):
    """Standard ConvLSTM gate equations with a +1 forget-gate bias."""

    def __init__(self, in_channels: int, hidden: int, kernel: int = 3):
        super().__init__()
        self.hidden = hidden
        self.gates = nn.Conv2d(in_channels + hidden, 4 * hidden, kernel,
                               padding=kernel // 2)
        with torch.no_grad():
            self.gates.bias[hidden : 2 * hidden] += 1.0

    def init_state(self, batch: int, height: int, width: int,
                   like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        shape = (batch, self.hidden, height, width)
        z = like.new_zeros(shape)
        return z, z.clone()

    def forward(self, x, state):
        h, c = state
        i, f, g, o = self.gates(torch.cat([x, h], dim=1)).chunk(4, dim=1)
        c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_new = torch.sigmoid(o) * torch.tanh(c_new)
        return h_new, (h_new, c_new)


class STLSTMCell(nn.Module):
    """ConvLSTM with a second, spatiotemporal memory that zigzags across
    layers and time. Returns the memory increments so the caller can form
    the decoupling penalty."""

    def __init__(self, in_channels: int, hidden: int, kernel: int = 3):
        super().__init__()
        self.hidden = hidden
        pad = kernel // 2
        self.conv_x = nn.Conv2d(in_channels, 7 * hidden, kernel, padding=pad)
        self.conv_h = nn.Conv2d(hidden, 4 * hidden, kernel, padding=pad)
        self.conv_m = nn.Conv2d(hidden, 3 * hidden, kernel, padding=pad)
        self.conv_o = nn.Conv2d(2 * hidden, hidden, kernel, padding=pad)
        self.conv_last = nn.Conv2d(2 * hidden, hidden, 1)
        with torch.no_grad():
            h = hidden
            self.conv_x.bias[h : 2 * h] += 1.0  # forget gate (temporal)
            self.conv_x.bias[4 * h : 5 * h] += 1.0  # forget gate (spatiotemporal)

    def forward(self, x, h, c, m):
        xs = self.conv_x(x).chunk(7, dim=1)
        i_x, f_x, g_x, i_xp, f_xp, g_xp, o_x = xs
        i_h, f_h, g_h, o_h = self.conv_h(h).chunk(4, dim=1)
        i_m, f_m, g_m = self.conv_m(m).chunk(3, dim=1)

        dc = torch.sigmoid(i_x + i_h) * torch.tanh(g_x + g_h)
        c_new = torch.sigmoid(f_x + f_h) * c + dc
        dm = torch.sigmoid(i_xp + i_m) * torch.tanh(g_xp + g_m)
        m_new = torch.sigmoid(f_xp + f_m) * m + dm

        mem = torch.cat([c_new, m_new], dim=1)
        o = torch.sigmoid(o_x + o_h + self.conv_o(mem))
        h_new = o * torch.tanh(self.conv_last(mem))
        return h_new, c_new, m_new, (dc, dm)


def decouple_penalty(dc: torch.Tensor, dm: torch.Tensor) -> torch.Tensor:
    """Mean absolute cosine similarity between the two memory increments,
    taken over the channel dimension at every position."""
    num = (dc * dm).sum(dim=1)
    den = dc.norm(dim=1) * dm.norm(dim=1) + 1e-12
    return (num / den).abs().mean()


class GSTABlock(nn.Module):
    """One gated spatiotemporal attention block: spatial depthwise conv,
    channelwise (temporal) 1x1 conv, multiplicative sigmoid gate."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.spatial = nn.Conv2d(in_channels, in_channels, kernel,
                                 padding=kernel // 2, groups=in_channels)
        self.temporal = nn.Conv2d(in_channels, out_channels, 1)
        self.gate = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ContractViolationError(
                f"GSTA block expects {self.in_channels} channels, got {x.shape[1]}"
            )
        return torch.sigmoid(self.gate(x)) * self.temporal(self.spatial(x))


class GSTATranslator(nn.Module):
    """Latent translator from T stacked context embeddings to K stacked
    target embeddings. Under the latent (or all) fusion policy a conditioner
    modulates the features at every block."""

    def __init__(self, t_in: int, t_out: int, width: int, hidden: int,
                 kernel: int = 3, n_layers: int = 2,
                 conditioners: nn.ModuleList | None = None,
                 cond_config: ConditioningConfig | None = None):
        super().__init__()
        if n_layers < 2:
            raise ContractViolationError("translator needs at least 2 layers")
        self.t_in, self.t_out, self.width = t_in, t_out, width
        channels = [t_in * width] + [hidden] * (n_layers - 1) + [t_out * width]
        self.blocks = nn.ModuleList(
            GSTABlock(channels[i], channels[i + 1], kernel)
            for i in range(n_layers)
        )
        self.conditioners = conditioners
        self.cond_config = cond_config

    def forward(self, x, c=None):
        if x.shape[1] != self.t_in * self.width:
            raise ContractViolationError(
                f"translator expects {self.t_in * self.width} channels, "
                f"got {x.shape[1]}"
            )
        for i, block in enumerate(self.blocks):
            if self.conditioners is not None and c is not None:
                cond = self.conditioners[i]
                if cond is not None and self.cond_config.location in ("latent", "all"):
                    x = cond(x, c)
            x = block(x)
        return x


class UNet(nn.Module):
    """UNet with PatchMerge downsampling, nearest upsampling, concat skips
    and weather conditioning at the bottleneck (fusion policy permitting)."""

    def __init__(self, in_channels: int, out_channels: int, depth: int,
                 hidden: int, kernel: int = 3, norm_groups: int = 16,
                 cond_config: ConditioningConfig | None = None,
                 make_conditioner=None):
        super().__init__()
        if depth < 1:
            raise ContractViolationError("depth must be >= 1")
        self.depth = depth
        k, g = kernel, norm_groups
        self.cond_config = cond_config or ConditioningConfig()

        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, k, padding=k // 2),
                group_norm(cout, g), nn.LeakyReLU(),
            )

        self.stem = block(in_channels, hidden)
        self.down = nn.ModuleList(
            nn.Sequential(nn.PixelUnshuffle(2), block(4 * hidden, hidden))
            for _ in range(depth)
        )
        self.bottleneck = block(hidden, hidden)
        self.cond_pre = self.cond_post = None
        if make_conditioner is not None and self.cond_config.method != "none":
            self.cond_pre = make_conditioner(hidden)
            self.cond_post = make_conditioner(hidden)
        self.up = nn.ModuleList(
            nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                          block(hidden, hidden))
            for _ in range(depth)
        )
        self.merge = nn.ModuleList(
            block(2 * hidden, hidden) for _ in range(depth)
        )
        self.head = nn.Conv2d(hidden, out_channels, 1)

    def forward(self, x, c=None):
        _check_divisible(x, 2 ** self.depth)
        z = self.stem(x)
        skips = []
        for down in self.down:
            skips.append(z)
            z = down(z)
        z = fuse("post-encoder", z, c, self.cond_pre, self.cond_config)
        z = self.bottleneck(z)
        z = fuse("pre-decoder", z, c, self.cond_post, self.cond_config)
        for i, up in enumerate(self.up):
            z = up(z)
            z = self.merge[i](torch.cat([z, skips[-(i + 1)]], dim=1))
        return self.head(z)
