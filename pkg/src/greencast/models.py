"""Assembled forecasters: each maps (context frames, weather, elevation) to a
K-step NDVI forecast.

Input frames carry 5 channels per timestep: ndvi, red, nir, quality and the
static elevation map; NaNs are zero-filled upstream with the quality channel
marking validity. Weather arrives as per-step statistics [B, T+K, V, 4]
(optionally pre-broadcast to pixel maps, which the shuffle harness permutes
together with the pixels). Output heads are linear; forecasts are clipped to
[-1, 1] only at emission, the training loss sees the raw head output.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbones import (
    EncoderDecoderConfig,
    ConvLSTMCell,
    GSTATranslator,
    PatchMergeDecoder,
    PatchMergeEncoder,
    STLSTMCell,
    UNet,
    decouple_penalty,
)
from .conditioning import ConditioningConfig, build_conditioner, fuse
from .errors import ContractViolationError, FormatError

FAMILIES = (
    "convlstm-meteo",
    "predrnn-meteo",
    "simvp-meteo",
    "lstm-1x1",
    "unet-next-frame",
    "unet-next-cuboid",
)

FRAME_CHANNELS = 5  # ndvi, red, nir, quality, elevation
_ELEV_CHANNEL = 4

_DEFAULT_CONDITIONING = {
    "convlstm-meteo": ("none", "early"),
    "lstm-1x1": ("none", "early"),
    "predrnn-meteo": ("film", "early"),
    "simvp-meteo": ("film", "latent"),
    "unet-next-frame": ("film", "latent"),
    "unet-next-cuboid": ("film", "latent"),
}


@dataclass
class ModelConfig:
    family: str
    hidden: int = 64
    kernel: int = 3
    conditioning: ConditioningConfig | None = None
    encoder: EncoderDecoderConfig = field(default_factory=EncoderDecoderConfig)
    context_length: int = 10
    target_length: int = 20
    n_weather_vars: int = 8
    meteo: bool = True
    seed: int = 0
    unet_depth: int = 3
    translator_hidden: int = 64
    translator_layers: int = 2

    def __post_init__(self):
        if self.conditioning is None:
            method, location = _DEFAULT_CONDITIONING.get(self.family, ("none", "early"))
            self.conditioning = ConditioningConfig(method=method, location=location)
        if self.family == "lstm-1x1":
            self.kernel = 1

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ContractViolationError(f"unknown model family {self.family!r}")
        if min(self.hidden, self.context_length, self.target_length,
               self.n_weather_vars) < 1:
            raise ContractViolationError("sizes must be positive")
        self.conditioning.validate()
        self.encoder.validate()
        if (self.family == "simvp-meteo" and self.conditioning.method != "none"
                and self.conditioning.location != "latent"):
            raise ContractViolationError(
                "simvp-meteo supports latent fusion or no conditioning"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conditioning"] = ConditioningConfig(**d["conditioning"])
        d["encoder"] = EncoderDecoderConfig(**d["encoder"])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class Forecast:
    """Predicted NDVI cuboid with provenance."""

    ndvi_hat: np.ndarray  # [K, H, W] float32, clipped to [-1, 1]
    model_id: str
    config_hash: str
    context_fingerprint: str


def step_tokens(weather: torch.Tensor, t: int) -> torch.Tensor:
    """Per-step weather tokens [B, V, 4] from the stats cube [B, S, V, 4]."""
    return weather[:, t]


def window_tokens(weather: torch.Tensor, t0: int) -> torch.Tensor:
    """One token per variable with the whole target window's statistics as
    features: [B, V, K*4]."""
    w = weather[:, t0:]  # [B, K, V, 4]
    return w.permute(0, 2, 1, 3).reshape(w.shape[0], w.shape[2], -1)


def prediction_frame(pred: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Build the 5-channel input frame that feeds a model its own forecast:
    clipped ndvi, zero reflectances, quality one, elevation carried over."""
    nd = pred.clamp(-1.0, 1.0)
    zeros = torch.zeros_like(nd)
    return torch.cat(
        [nd, zeros, zeros, torch.ones_like(nd),
         reference[:, _ELEV_CHANNEL : _ELEV_CHANNEL + 1]], dim=1
    )


class ConvLstmForecaster(nn.Module):
    """Encoding-forecasting ConvLSTM: two cells ingest the context (frames
    plus weather), two fresh cells roll out the target period on future
    weather, starting from the handed-over states. The last observed frame
    is kept in the target-side input as a static level anchor (the recurrent
    state alone cannot hold per-pixel levels over 20 steps at small hidden
    widths). The pixelwise LSTM is this model with 1x1 kernels."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        cond = config.conditioning
        h, k = config.hidden, config.kernel
        self.raw_concat = config.meteo and cond.method == "none"
        n_cond = config.n_weather_vars * 4
        in_ch = FRAME_CHANNELS + (n_cond if self.raw_concat else 0)
        self.cond_ctx = self.cond_tgt = None
        if config.meteo and cond.method != "none":
            self.cond_ctx = build_conditioner(cond, FRAME_CHANNELS,
                                              config.n_weather_vars, 4)
            self.cond_tgt = build_conditioner(cond, FRAME_CHANNELS,
                                              config.n_weather_vars, 4)
        self.ctx_cells = nn.ModuleList(
            [ConvLSTMCell(in_ch, h, k), ConvLSTMCell(h, h, k)]
        )
        self.tgt_cells = nn.ModuleList(
            [ConvLSTMCell(in_ch, h, k), ConvLSTMCell(h, h, k)]
        )
        self.head = nn.Conv2d(h, 1, 1)

    def _inject(self, x, weather, weather_maps, t, conditioner):
        if not self.config.meteo:
            return x
        if self.raw_concat:
            if weather_maps is not None:
                maps = weather_maps[:, t]
            else:
                flat = weather[:, t].reshape(weather.shape[0], -1)
                maps = flat[:, :, None, None].expand(-1, -1, *x.shape[-2:])
            return torch.cat([x, maps], dim=1)
        return fuse("input", x, step_tokens(weather, t), conditioner,
                    self.config.conditioning)

    def forward(self, frames, weather=None, weather_maps=None,
                target_frames=None, feed_truth=None):
        cfg = self.config
        b, t_len = frames.shape[:2]
        hgt, wid = frames.shape[-2:]
        states = [cell.init_state(b, hgt, wid, frames) for cell in self.ctx_cells]
        for t in range(t_len):
            x = self._inject(frames[:, t], weather, weather_maps, t, self.cond_ctx)
            for i, cell in enumerate(self.ctx_cells):
                x, states[i] = cell(x, states[i])
        preds = []
        last = frames[:, -1]
        for j in range(cfg.target_length):
            x = self._inject(last, weather, weather_maps, t_len + j, self.cond_tgt)
            for i, cell in enumerate(self.tgt_cells):
                x, states[i] = cell(x, states[i])
            preds.append(self.head(x))
        return {"pred": torch.cat(preds, dim=1), "aux": frames.new_zeros(())}


class PredRnnForecaster(nn.Module):
    """Next-frame model with two ST-LSTM cells between a PatchMerge encoder
    and decoder. The spatiotemporal memory zigzags (deepest cell's m feeds
    the first cell at the next step); weather conditions each cell's input.
    After the context it rolls out on its own predictions, with optional
    scheduled teacher forcing, and reports the memory decoupling penalty."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        cond = config.conditioning
        enc_cfg = config.encoder
        h = config.hidden
        if enc_cfg.hidden != h:
            enc_cfg = EncoderDecoderConfig(
                hidden=h, kernel=enc_cfg.kernel, down_factor=enc_cfg.down_factor,
                norm_groups=enc_cfg.norm_groups,
                skip_connections=enc_cfg.skip_connections,
            )
        self.encoder = PatchMergeEncoder(FRAME_CHANNELS, enc_cfg)
        self.decoder = PatchMergeDecoder(1, enc_cfg)
        self.cells = nn.ModuleList(
            [STLSTMCell(h, h, config.kernel), STLSTMCell(h, h, config.kernel)]
        )
        make = lambda: build_conditioner(cond, h, config.n_weather_vars, 4)
        use_cond = config.meteo and cond.method != "none"
        self.cell_conds = nn.ModuleList(
            [make() if use_cond else None for _ in self.cells]  # type: ignore
        ) if use_cond else [None, None]
        self.cond_post_enc = make() if use_cond else None
        self.cond_pre_dec = make() if use_cond else None

    def forward(self, frames, weather=None, weather_maps=None,
                target_frames=None, feed_truth=None):
        cfg = self.config
        cond = cfg.conditioning
        b, t_len = frames.shape[:2]
        k_len = cfg.target_length
        hidden = cfg.hidden
        down = cfg.encoder.down_factor
        hl, wl = frames.shape[-2] // down, frames.shape[-1] // down
        h_st = [frames.new_zeros(b, hidden, hl, wl) for _ in self.cells]
        c_st = [frames.new_zeros(b, hidden, hl, wl) for _ in self.cells]
        m = frames.new_zeros(b, hidden, hl, wl)

        preds = []
        penalties = []
        frame = frames[:, 0]
        for t in range(t_len + k_len - 1):
            if t < t_len:
                frame = frames[:, t]
            else:
                j = t - t_len  # target frame index being fed
                use_truth = (
                    feed_truth is not None and target_frames is not None
                    and bool(feed_truth[:, j].any())
                )
                if use_truth:
                    mask = feed_truth[:, j].view(b, 1, 1, 1).to(frames.dtype)
                    truth = target_frames[:, j]
                    fed = prediction_frame(preds[-1], frame)
                    frame = mask * truth + (1.0 - mask) * fed
                else:
                    frame = prediction_frame(preds[-1], frame)
            tok = (step_tokens(weather, t + 1)
                   if cfg.meteo and weather is not None else None)
            z, skips = self.encoder(frame)
            z = fuse("post-encoder", z, tok, self.cond_post_enc, cond)
            feed = z
            for i, cell in enumerate(self.cells):
                x_in = fuse("input", feed, tok, self.cell_conds[i], cond)
                h_new, c_new, m, (dc, dm) = cell(x_in, h_st[i], c_st[i], m)
                h_st[i], c_st[i] = h_new, c_new
                penalties.append(decouple_penalty(dc, dm))
                feed = h_new + feed  # residual feed between cells
            out = fuse("pre-decoder", feed, tok, self.cond_pre_dec, cond)
            preds.append(self.decoder(out, skips))
        pred = torch.cat(preds[t_len - 1 :], dim=1)
        aux = torch.stack(penalties).mean()
        return {"pred": pred, "aux": aux}


class SimVpForecaster(nn.Module):
    """Single-shot cuboid predictor: per-frame PatchMerge encoder, gated
    spatiotemporal attention translator over channel-stacked timesteps,
    per-frame decoder reusing the last context frame's skips. Weather joins
    through feature-wise modulation in the latent space."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        cond = config.conditioning
        enc_cfg = config.encoder
        d = enc_cfg.hidden
        t_len, k_len = config.context_length, config.target_length
        self.encoder = PatchMergeEncoder(FRAME_CHANNELS, enc_cfg)
        self.decoder = PatchMergeDecoder(1, enc_cfg)
        n_feat = 4 * k_len
        use_cond = config.meteo and cond.method != "none"
        make = lambda width: build_conditioner(cond, width,
                                               config.n_weather_vars, n_feat)
        self.cond_post_enc = make(t_len * d) if use_cond else None
        self.cond_pre_dec = make(k_len * d) if use_cond else None
        channels = ([t_len * d] + [config.translator_hidden]
                    * (config.translator_layers - 1) + [k_len * d])
        block_conds = (nn.ModuleList([make(c) for c in channels[:-1]])
                       if use_cond else None)
        self.translator = GSTATranslator(
            t_len, k_len, d, config.translator_hidden, config.kernel,
            config.translator_layers, conditioners=block_conds,
            cond_config=cond,
        )

    def forward(self, frames, weather=None, weather_maps=None,
                target_frames=None, feed_truth=None):
        cfg = self.config
        b, t_len = frames.shape[:2]
        k_len = cfg.target_length
        z, skips = self.encoder(frames.reshape(-1, *frames.shape[2:]))
        d, hl, wl = z.shape[1:]
        last_skips = [s.view(b, t_len, *s.shape[1:])[:, -1] for s in skips]
        z = z.view(b, t_len * d, hl, wl)
        tok = (window_tokens(weather, t_len)
               if cfg.meteo and weather is not None else None)
        cond = cfg.conditioning
        z = fuse("post-encoder", z, tok, self.cond_post_enc, cond)
        z = self.translator(z, tok)
        z = fuse("pre-decoder", z, tok, self.cond_pre_dec, cond)
        z = z.view(b * k_len, d, hl, wl)
        rep_skips = [
            s.unsqueeze(1).expand(-1, k_len, *s.shape[1:]).reshape(-1, *s.shape[1:])
            for s in last_skips
        ]
        pred = self.decoder(z, rep_skips).view(b, k_len, *frames.shape[-2:])
        return {"pred": pred, "aux": frames.new_zeros(())}


class UNetNextFrame(nn.Module):
    """Memoryless autoregressive baseline: a UNet maps the current frame to
    the next one, conditioned on the predicted step's weather at the
    bottleneck; target steps feed back its own (clipped) predictions."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        cond = config.conditioning
        use_cond = config.meteo and cond.method != "none"
        make = (lambda width: build_conditioner(cond, width,
                                                config.n_weather_vars, 4)) \
            if use_cond else None
        self.unet = UNet(FRAME_CHANNELS, 1, config.unet_depth, config.hidden,
                         config.kernel, config.encoder.norm_groups,
                         cond_config=cond, make_conditioner=make)

    def forward(self, frames, weather=None, weather_maps=None,
                target_frames=None, feed_truth=None):
        cfg = self.config
        b, t_len = frames.shape[:2]
        k_len = cfg.target_length
        preds = []
        frame = frames[:, -1]
        for j in range(k_len):
            tok = (step_tokens(weather, t_len + j)
                   if cfg.meteo and weather is not None else None)
            out = self.unet(frame, tok)
            preds.append(out)
            if j + 1 < k_len:
                use_truth = (
                    feed_truth is not None and target_frames is not None
                    and bool(feed_truth[:, j].any())
                )
                fed = prediction_frame(out, frame)
                if use_truth:
                    mask = feed_truth[:, j].view(b, 1, 1, 1).to(frames.dtype)
                    frame = mask * target_frames[:, j] + (1.0 - mask) * fed
                else:
                    frame = fed
        return {"pred": torch.cat(preds, dim=1), "aux": frames.new_zeros(())}


class UNetNextCuboid(nn.Module):
    """Early spatio-temporal fusion baseline: all context frames stacked
    along channels, one UNet emits the whole target cuboid at once."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        cond = config.conditioning
        use_cond = config.meteo and cond.method != "none"
        n_feat = 4 * config.target_length
        make = (lambda width: build_conditioner(cond, width,
                                                config.n_weather_vars, n_feat)) \
            if use_cond else None
        self.unet = UNet(FRAME_CHANNELS * config.context_length,
                         config.target_length, config.unet_depth, config.hidden,
                         config.kernel, config.encoder.norm_groups,
                         cond_config=cond, make_conditioner=make)

    def forward(self, frames, weather=None, weather_maps=None,
                target_frames=None, feed_truth=None):
        cfg = self.config
        b = frames.shape[0]
        x = frames.reshape(b, -1, *frames.shape[-2:])
        tok = (window_tokens(weather, cfg.context_length)
               if cfg.meteo and weather is not None else None)
        return {"pred": self.unet(x, tok), "aux": frames.new_zeros(())}


_FAMILY_CLASSES = {
    "convlstm-meteo": ConvLstmForecaster,
    "lstm-1x1": ConvLstmForecaster,
    "predrnn-meteo": PredRnnForecaster,
    "simvp-meteo": SimVpForecaster,
    "unet-next-frame": UNetNextFrame,
    "unet-next-cuboid": UNetNextCuboid,
}


def build_model(config: ModelConfig) -> nn.Module:
    """Construct a forecaster with seed-deterministic initialization."""
    config.validate()
    torch.manual_seed(config.seed)
    return _FAMILY_CLASSES[config.family](config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def forecast(model: nn.Module, frames: np.ndarray, weather: np.ndarray | None,
             location_ids: list[str] | None = None) -> list[Forecast]:
    """Run one batch in eval mode and wrap the clipped predictions.

    frames: [B, T, 5, H, W] float32; weather: [B, T+K, V, 4] or None.
    """
    config: ModelConfig = model.config
    model.eval()
    with torch.no_grad():
        out = model(
            torch.from_numpy(np.nan_to_num(frames)).float(),
            torch.from_numpy(weather).float() if weather is not None else None,
        )
    pred = out["pred"].clamp(-1.0, 1.0).numpy().astype(np.float32)
    results = []
    for i in range(pred.shape[0]):
        fp = hashlib.sha1(frames[i].tobytes()).hexdigest()[:16]
        results.append(Forecast(
            ndvi_hat=pred[i],
            model_id=config.family,
            config_hash=config.config_hash(),
            context_fingerprint=fp,
        ))
    return results


def save_checkpoint(model: nn.Module, path, history: list | None = None) -> None:
    """Write manifest.json (config, seed, history, parameter index) plus a
    flat little-endian float32 blob keyed by parameter path."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    config: ModelConfig = model.config
    state = model.state_dict()
    index = {}
    offset = 0
    blobs = []
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy().astype("<f4")
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        blobs.append(arr.tobytes())
        offset += arr.size * 4
    (out / "params.bin").write_bytes(b"".join(blobs))
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "parameters": index,
        "history": history or [],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    """Rebuild the model from a checkpoint directory."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"missing checkpoint manifest in {root}")
    manifest = json.loads(mpath.read_text())
    config = ModelConfig.from_dict(manifest["config"])
    model = build_model(config)
    raw = (root / "params.bin").read_bytes()
    state = {}
    for name, meta in manifest["parameters"].items():
        shape = meta["shape"]
        size = int(np.prod(shape)) * 4 if shape else 4
        chunk = raw[meta["offset"] : meta["offset"] + size]
        if len(chunk) != size:
            raise FormatError(f"parameter {name!r}: blob truncated")
        state[name] = torch.from_numpy(
            np.frombuffer(chunk, dtype="<f4").copy().reshape(shape)
        )
    model.load_state_dict(state)
    return model, manifest
