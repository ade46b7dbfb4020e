"""Segmentation architectures behind one forward interface.

Two families: a hierarchical-transformer encoder with a lightweight
all-MLP decoder (scaled variants b0-b5 plus desk-scale toy variants),
and an attention U-Net with gated skip connections. Both emit logits at
full input resolution, and both support a feature-perturbation stream
(seeded channel dropout on the deepest encoder output) for the
dual-stream consistency objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class ModelError(Exception):
    pass


# Encoder scale table: per-stage widths and block counts. Toy variants are
# for tests and CPU-scale experiments.
SEGFORMER_VARIANTS: dict[str, dict] = {
    "b0": dict(embed_dims=(32, 64, 160, 256), depths=(2, 2, 2, 2)),
    "b1": dict(embed_dims=(64, 128, 320, 512), depths=(2, 2, 2, 2)),
    "b2": dict(embed_dims=(64, 128, 320, 512), depths=(3, 4, 6, 3)),
    "b3": dict(embed_dims=(64, 128, 320, 512), depths=(3, 4, 18, 3)),
    "b4": dict(embed_dims=(64, 128, 320, 512), depths=(3, 8, 27, 3)),
    "b5": dict(embed_dims=(64, 128, 320, 512), depths=(3, 6, 40, 3)),
    "tiny": dict(embed_dims=(8, 16, 32, 64), depths=(1, 1, 1, 1),
                 num_heads=(1, 2, 4, 8), decoder_dim=32),
    "small": dict(embed_dims=(16, 32, 64, 128), depths=(1, 1, 2, 2),
                  num_heads=(1, 2, 4, 8), decoder_dim=64),
}

_DEFAULT_HEADS = (1, 2, 5, 8)
_DEFAULT_SR_RATIOS = (8, 4, 2, 1)
_DEFAULT_DECODER_DIM = 256


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "segformer"  # "segformer" | "att_unet"
    variant: str | None = "b1"
    num_classes: int = 2
    input_channels: int = 3
    # Explicit stage dims override the variant table (toy configs).
    embed_dims: tuple[int, ...] | None = None
    depths: tuple[int, ...] | None = None
    num_heads: tuple[int, ...] | None = None
    sr_ratios: tuple[int, ...] = _DEFAULT_SR_RATIOS
    mlp_ratio: int = 4
    decoder_dim: int | None = None
    drop_rate_fp: float = 0.5
    unet_base_channels: int = 128
    init_weights: str | None = None  # local checkpoint/state-dict path, never fetched

    def __post_init__(self):
        if self.arch not in ("segformer", "att_unet"):
            raise ModelError(f"unknown arch {self.arch!r}")
        if self.num_classes < 2:
            raise ModelError("num_classes must be >= 2")
        if not 0.0 <= self.drop_rate_fp < 1.0:
            raise ModelError("drop_rate_fp must lie in [0, 1)")

    def resolved_segformer(self) -> dict:
        """Concrete stage dims from the variant table plus any overrides."""
        base: dict = {}
        if self.variant is not None:
            if self.variant not in SEGFORMER_VARIANTS:
                raise ModelError(
                    f"unknown variant {self.variant!r}; known: {sorted(SEGFORMER_VARIANTS)}"
                )
            base = dict(SEGFORMER_VARIANTS[self.variant])
        out = dict(
            embed_dims=self.embed_dims or base.get("embed_dims"),
            depths=self.depths or base.get("depths"),
            num_heads=self.num_heads or base.get("num_heads", _DEFAULT_HEADS),
            sr_ratios=self.sr_ratios,
            mlp_ratio=self.mlp_ratio,
            decoder_dim=self.decoder_dim or base.get("decoder_dim", _DEFAULT_DECODER_DIM),
        )
        if out["embed_dims"] is None or out["depths"] is None:
            raise ModelError("segformer config needs a variant or explicit embed_dims/depths")
        for key in ("embed_dims", "depths", "num_heads", "sr_ratios"):
            if len(out[key]) != 4:
                raise ModelError(f"{key} must have 4 stages, got {out[key]}")
        return out


# ---------------------------------------------------------------------------
# hierarchical transformer encoder + MLP decoder
# ---------------------------------------------------------------------------

class _OverlapPatchEmbed(nn.Module):
    def __init__(self, in_ch, dim, kernel, stride):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, dim, kernel_size=kernel, stride=stride,
                              padding=kernel // 2)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.proj(x)
        _, _, h, w = x.shape
        x = x.flatten(2).transpose(1, 2)
        return self.norm(x), h, w


class _EfficientSelfAttention(nn.Module):
    """Multi-head attention with spatially reduced keys/values."""

    def __init__(self, dim, num_heads, sr_ratio):
        super().__init__()
        if dim % num_heads != 0:
            raise ModelError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)

    def forward(self, x, h, w):
        b, n, c = x.shape
        q = self.q(x).reshape(b, n, self.num_heads, c // self.num_heads).permute(0, 2, 1, 3)
        if self.sr_ratio > 1:
            red = x.transpose(1, 2).reshape(b, c, h, w)
            red = self.sr(red).reshape(b, c, -1).transpose(1, 2)
            red = self.sr_norm(red)
        else:
            red = x
        kv = self.kv(red).reshape(b, -1, 2, self.num_heads, c // self.num_heads)
        k, v = kv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class _MixFFN(nn.Module):
    """Linear -> depthwise 3x3 -> GELU -> linear; conv injects locality."""

    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, h, w):
        x = self.fc1(x)
        b, n, c = x.shape
        x = x.transpose(1, 2).reshape(b, c, h, w)
        x = self.dwconv(x).flatten(2).transpose(1, 2)
        return self.fc2(self.act(x))


class _TransformerBlock(nn.Module):
    def __init__(self, dim, num_heads, sr_ratio, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _EfficientSelfAttention(dim, num_heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = _MixFFN(dim, dim * mlp_ratio)

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        x = x + self.ffn(self.norm2(x), h, w)
        return x


class _MLPDecoder(nn.Module):
    """Project all stages to one width, fuse at 1/4 scale, classify."""

    def __init__(self, embed_dims, decoder_dim, num_classes):
        super().__init__()
        self.proj = nn.ModuleList(nn.Linear(d, decoder_dim) for d in embed_dims)
        self.fuse = nn.Conv2d(4 * decoder_dim, decoder_dim, kernel_size=1, bias=False)
        self.bn = nn.BatchNorm2d(decoder_dim)
        self.classifier = nn.Conv2d(decoder_dim, num_classes, kernel_size=1)

    def forward(self, feats):
        target = feats[0].shape[2:]
        planes = []
        for feat, proj in zip(feats, self.proj):
            b, c, h, w = feat.shape
            p = proj(feat.flatten(2).transpose(1, 2))
            p = p.transpose(1, 2).reshape(b, -1, h, w)
            if p.shape[2:] != target:
                p = F.interpolate(p, size=target, mode="bilinear", align_corners=False)
            planes.append(p)
        fused = F.relu(self.bn(self.fuse(torch.cat(planes, dim=1))))
        return self.classifier(fused)


class SegFormerModel(nn.Module):
    downsample_factor = 32

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dims = config.resolved_segformer()
        embed_dims = dims["embed_dims"]
        depths = dims["depths"]
        heads = dims["num_heads"]
        srs = dims["sr_ratios"]

        self.patch_embeds = nn.ModuleList()
        self.stages = nn.ModuleList()
        self.stage_norms = nn.ModuleList()
        in_ch = config.input_channels
        for i in range(4):
            kernel, stride = (7, 4) if i == 0 else (3, 2)
            self.patch_embeds.append(_OverlapPatchEmbed(in_ch, embed_dims[i], kernel, stride))
            self.stages.append(nn.ModuleList(
                _TransformerBlock(embed_dims[i], heads[i], srs[i], dims["mlp_ratio"])
                for _ in range(depths[i])
            ))
            self.stage_norms.append(nn.LayerNorm(embed_dims[i]))
            in_ch = embed_dims[i]
        self.decoder = _MLPDecoder(embed_dims, dims["decoder_dim"], config.num_classes)

    def encode(self, x):
        feats = []
        for embed, blocks, norm in zip(self.patch_embeds, self.stages, self.stage_norms):
            x, h, w = embed(x)
            for block in blocks:
                x = block(x, h, w)
            x = norm(x)
            x = x.transpose(1, 2).reshape(x.shape[0], -1, h, w)
            feats.append(x)
        return feats

    def forward(self, x, drop_rate: float | None = None,
                drop_generator: torch.Generator | None = None):
        _check_divisible(x, self.downsample_factor)
        feats = self.encode(x)
        if drop_rate is not None:
            feats = feats[:-1] + [channel_dropout(feats[-1], drop_rate, drop_generator)]
        logits = self.decoder(feats)
        return F.interpolate(logits, size=x.shape[2:], mode="bilinear", align_corners=False)


# ---------------------------------------------------------------------------
# attention U-Net
# ---------------------------------------------------------------------------

class _ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class _UpConv(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.up(x)


class _AttentionGate(nn.Module):
    """Gates a skip connection with a coarse-level attention map."""

    def __init__(self, gate_ch, skip_ch, inter_ch):
        super().__init__()
        self.w_gate = nn.Sequential(nn.Conv2d(gate_ch, inter_ch, 1), nn.BatchNorm2d(inter_ch))
        self.w_skip = nn.Sequential(nn.Conv2d(skip_ch, inter_ch, 1), nn.BatchNorm2d(inter_ch))
        self.psi = nn.Sequential(nn.Conv2d(inter_ch, 1, 1), nn.BatchNorm2d(1), nn.Sigmoid())

    def forward(self, gate, skip):
        a = F.relu(self.w_gate(gate) + self.w_skip(skip))
        return skip * self.psi(a)


class AttentionUNetModel(nn.Module):
    downsample_factor = 16

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.unet_base_channels
        chans = [c, 2 * c, 4 * c, 8 * c, 16 * c]
        self.pool = nn.MaxPool2d(2)
        self.enc = nn.ModuleList([
            _ConvBlock(config.input_channels, chans[0]),
            _ConvBlock(chans[0], chans[1]),
            _ConvBlock(chans[1], chans[2]),
            _ConvBlock(chans[2], chans[3]),
            _ConvBlock(chans[3], chans[4]),
        ])
        self.ups = nn.ModuleList([_UpConv(chans[i + 1], chans[i]) for i in range(4)])
        self.gates = nn.ModuleList([
            _AttentionGate(chans[i], chans[i], max(chans[i] // 2, 1)) for i in range(4)
        ])
        self.dec = nn.ModuleList([_ConvBlock(chans[i + 1], chans[i]) for i in range(4)])
        self.head = nn.Conv2d(chans[0], config.num_classes, 1)

    def encode(self, x):
        feats = []
        for i, block in enumerate(self.enc):
            if i > 0:
                x = self.pool(x)
            x = block(x)
            feats.append(x)
        return feats

    def decode(self, feats):
        x = feats[-1]
        for i in range(3, -1, -1):
            x = self.ups[i](x)
            skip = self.gates[i](x, feats[i])
            x = self.dec[i](torch.cat([skip, x], dim=1))
        return self.head(x)

    def forward(self, x, drop_rate: float | None = None,
                drop_generator: torch.Generator | None = None):
        _check_divisible(x, self.downsample_factor)
        feats = self.encode(x)
        if drop_rate is not None:
            feats = feats[:-1] + [channel_dropout(feats[-1], drop_rate, drop_generator)]
        return self.decode(feats)


# ---------------------------------------------------------------------------
# shared operations
# ---------------------------------------------------------------------------

def _check_divisible(x: torch.Tensor, factor: int) -> None:
    h, w = x.shape[2], x.shape[3]
    if h % factor or w % factor:
        raise ModelError(
            f"input spatial dims must be multiples of {factor}, got {(int(h), int(w))}"
        )


def channel_dropout(features: torch.Tensor, drop_rate: float,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    """Zero whole channels w.p. drop_rate, rescale survivors by 1/(1-p)."""
    if not 0.0 < drop_rate < 1.0:
        raise ModelError(f"drop_rate {drop_rate} outside (0, 1)")
    b, c = features.shape[0], features.shape[1]
    draw = torch.rand(b, c, 1, 1, generator=generator, dtype=features.dtype)
    keep = (draw >= drop_rate).to(features.dtype)
    return features * keep / (1.0 - drop_rate)


def _init_module(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Conv2d):
        fan_out = module.kernel_size[0] * module.kernel_size[1] * module.out_channels
        fan_out //= module.groups
        nn.init.normal_(module.weight, mean=0.0, std=math.sqrt(2.0 / fan_out))
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.LayerNorm, nn.BatchNorm2d)):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def build_model(config: ModelConfig, seed: int = 0) -> nn.Module:
    """Instantiate with deterministic initialization for a given seed."""
    torch.manual_seed(seed)
    if config.arch == "segformer":
        model: nn.Module = SegFormerModel(config)
    else:
        model = AttentionUNetModel(config)
    model.apply(_init_module)
    if config.init_weights:
        state = torch.load(config.init_weights, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        model.load_state_dict(state, strict=False)
    return model


def forward(model: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """Full-resolution logits, B x num_classes x H x W."""
    return model(batch)


def forward_feature_perturbed(model: nn.Module, batch: torch.Tensor,
                              drop_rate: float, seed: int) -> torch.Tensor:
    """Forward with seeded channel dropout on the deepest encoder output."""
    if not 0.0 < drop_rate < 1.0:
        raise ModelError(f"drop_rate {drop_rate} outside (0, 1)")
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return model(batch, drop_rate=drop_rate, drop_generator=gen)


def count_parameters(model: nn.Module) -> int:
    """Exact count of trainable scalars."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1

_TUPLE_FIELDS = ("embed_dims", "depths", "num_heads", "sr_ratios")


def model_config_to_dict(config: ModelConfig) -> dict:
    from dataclasses import asdict

    out = asdict(config)
    for key in _TUPLE_FIELDS:
        if out[key] is not None:
            out[key] = list(out[key])
    return out


def model_config_from_dict(data: dict) -> ModelConfig:
    data = dict(data)
    for key in _TUPLE_FIELDS:
        if data.get(key) is not None:
            data[key] = tuple(data[key])
    return ModelConfig(**data)


def save_checkpoint(model: nn.Module, path) -> None:
    """Weights plus embedded architecture config and a version tag."""
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": "glomseg-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model_config": model_config_to_dict(model.config),
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path) -> nn.Module:
    """Rebuild the model from a checkpoint; no run config needed."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch.load raises a zoo of unpickling errors
        raise ModelError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != "glomseg-checkpoint":
        raise ModelError(f"{path} is not a recognized checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ModelError(
            f"checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    config = model_config_from_dict(payload["model_config"])
    model = build_model(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
