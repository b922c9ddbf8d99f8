"""Segmentation (3D U-Net, Swin-UNETR) and FLT-presence classification (DenseNet) networks.

All segmenters map (B, C, x, y, z) -> (B, K, x, y, z) logits; spatial dims must be
divisible by 2 ** (depth - 1). Softmax is applied by the pipelines, never here.
"""
from __future__ import annotations
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from monai.networks.blocks import UnetOutBlock, UnetrBasicBlock, UnetrUpBlock
from monai.networks.nets import DenseNet

from errors import ConfigError, ShapeError

log = logging.getLogger("tbadseg.networks")

CHECKPOINT_FORMAT = 1
SEGMENTER_ARCHS = ("unet3d", "swin_unetr")
CLASSIFIER_BLOCKS = {
    "densenet_small": (6, 12, 24, 16),  # DenseNet-121 layout
    "densenet_large": (6, 12, 64, 48),  # DenseNet-264 layout
}


@dataclass(frozen=True)
class SegmenterConfig:
    architecture: str = "unet3d"
    in_channels: int = 1
    out_classes: int = 4
    base_width: int = 16
    depth: int = 4
    window_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in SEGMENTER_ARCHS:
            raise ConfigError(f"unknown segmenter architecture {self.architecture!r}")
        if self.out_classes < 2:
            raise ConfigError("out_classes must be >= 2")
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.in_channels < 1 or self.base_width < 1 or self.window_size < 1:
            raise ConfigError("in_channels, base_width and window_size must be positive")

    @property
    def required_divisor(self) -> int:
        return 2 ** (self.depth - 1)


@dataclass(frozen=True)
class ClassifierConfig:
    architecture: str = "densenet_small"
    in_channels: int = 1
    growth_rate: int = 8
    init_features: int = 16
    block_config: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in CLASSIFIER_BLOCKS:
            raise ConfigError(f"unknown classifier architecture {self.architecture!r}")
        if self.block_config is None:
            object.__setattr__(self, "block_config", CLASSIFIER_BLOCKS[self.architecture])
        object.__setattr__(self, "block_config", tuple(int(b) for b in self.block_config))
        if self.in_channels < 1 or self.growth_rate < 1 or not self.block_config:
            raise ConfigError("invalid classifier config")


def _check_spatial(x: torch.Tensor, divisor: int, name: str):
    if x.dim() != 5:
        raise ShapeError(f"{name} expects (B, C, x, y, z) input, got {tuple(x.shape)}")
    bad = [n for n in x.shape[2:] if n % divisor]
    if bad:
        raise ShapeError(f"{name}: spatial dims {tuple(x.shape[2:])} must be divisible by {divisor}")


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv3d(cin, cout, 3, padding=1, bias=False),
            nn.InstanceNorm3d(cout, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Conv3d(cout, cout, 3, padding=1, bias=False),
            nn.InstanceNorm3d(cout, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
        )


class UNet3D(nn.Module):
    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        self.config = cfg
        widths = [cfg.base_width * 2 ** i for i in range(cfg.depth)]
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for w in widths:
            self.down.append(ConvBlock(cin, w))
            cin = w
        self.pool = nn.MaxPool3d(2)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for hi, lo in zip(reversed(widths[1:]), reversed(widths[:-1])):
            self.up.append(nn.ConvTranspose3d(hi, lo, kernel_size=2, stride=2, bias=False))
            self.dec.append(ConvBlock(2 * lo, lo))
        self.head = nn.Conv3d(widths[0], cfg.out_classes, kernel_size=1)

    @property
    def in_channels(self) -> int:
        return self.config.in_channels

    @property
    def out_classes(self) -> int:
        return self.config.out_classes

    @property
    def required_divisor(self) -> int:
        return self.config.required_divisor

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_spatial(x, self.required_divisor, "unet3d")
        skips = []
        for i, block in enumerate(self.down):
            x = block(x if i == 0 else self.pool(x))
            skips.append(x)
        x = skips.pop()
        for up, dec in zip(self.up, self.dec):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)


def window_partition(x: torch.Tensor, ws: tuple[int, int, int]) -> torch.Tensor:
    b, d, h, w, c = x.shape
    x = x.view(b, d // ws[0], ws[0], h // ws[1], ws[1], w // ws[2], ws[2], c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, ws[0] * ws[1] * ws[2], c)


def window_reverse(windows: torch.Tensor, ws: tuple[int, int, int], b: int, d: int, h: int, w: int) -> torch.Tensor:
    x = windows.view(b, d // ws[0], h // ws[1], w // ws[2], ws[0], ws[1], ws[2], -1)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, d, h, w, -1)


def _shift_mask(size, ws, shifts, device) -> torch.Tensor:
    img_mask = torch.zeros((1, *size, 1), device=device)
    ranges = []
    for w, s in zip(ws, shifts):
        ranges.append((slice(0, -w), slice(-w, -s), slice(-s, None)) if s else (slice(None),))
    cnt = 0
    for a in ranges[0]:
        for b in ranges[1]:
            for c in ranges[2]:
                img_mask[:, a, b, c, :] = cnt
                cnt += 1
    mask_windows = window_partition(img_mask, ws).squeeze(-1)
    mask = mask_windows[:, None, :] - mask_windows[:, :, None]
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, window: tuple[int, int, int], heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.bias_table = nn.Parameter(
            torch.zeros((2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1), heads)
        )
        nn.init.trunc_normal_(self.bias_table, std=0.02)
        coords = torch.stack(torch.meshgrid(*[torch.arange(w) for w in window], indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
        rel = rel + torch.tensor([w - 1 for w in window])
        index = rel[..., 0] * (2 * window[1] - 1) * (2 * window[2] - 1) + rel[..., 1] * (2 * window[2] - 1) + rel[..., 2]
        self.register_buffer("bias_index", index, persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b_, n, c = x.shape
        qkv = self.qkv(x).reshape(b_, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0] * self.scale, qkv[1], qkv[2]
        attn = q @ k.transpose(-2, -1)
        bias = self.bias_table[self.bias_index.reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(b_ // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(-1, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b_, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: tuple[int, int, int], shifted: bool, mlp_ratio: float = 4.0):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w, _ = x.shape
        ws = self.window
        shortcut = x
        x = self.norm1(x)
        pad = [(-n) % k for n, k in zip((d, h, w), ws)]
        # zero padding up to whole windows; padded tokens are cropped after attention
        x = F.pad(x, (0, 0, 0, pad[2], 0, pad[1], 0, pad[0]))
        size = (d + pad[0], h + pad[1], w + pad[2])
        shifts = tuple(k // 2 if self.shifted and n > k else 0 for n, k in zip(size, ws))
        mask = None
        if any(shifts):
            x = torch.roll(x, shifts=tuple(-s for s in shifts), dims=(1, 2, 3))
            mask = _shift_mask(size, ws, shifts, x.device)
        x = window_reverse(self.attn(window_partition(x, ws), mask), ws, b, *size)
        if any(shifts):
            x = torch.roll(x, shifts=shifts, dims=(1, 2, 3))
        x = shortcut + x[:, :d, :h, :w, :].contiguous()
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        parts = [x[:, i::2, j::2, k::2, :] for i in (0, 1) for j in (0, 1) for k in (0, 1)]
        return self.reduction(self.norm(torch.cat(parts, dim=-1)))


def _heads_for(dim: int, head_dim: int = 16) -> int:
    heads = max(1, dim // head_dim)
    while dim % heads:
        heads -= 1
    return heads


class SwinUNETR3D(nn.Module):
    """Swin-UNETR at configurable scale: a conv stem at full resolution, a patch
    embedding to 1/2, then depth - 1 Swin stages joined by patch merging, decoded
    by UNETR up-blocks with skips from every stage.

    monai's SwinUNETR fixes five stages and needs every side divisible by 32; this
    variant only needs 2 ** (depth - 1), so it also runs on small patches and phantoms."""

    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        self.config = cfg
        c = cfg.base_width
        window = (cfg.window_size,) * 3
        dims = [c * 2 ** s for s in range(cfg.depth - 1)]

        self.encoder0 = UnetrBasicBlock(3, cfg.in_channels, c, kernel_size=3, stride=1, norm_name="instance", res_block=True)
        self.patch_embed = nn.Conv3d(cfg.in_channels, c, kernel_size=2, stride=2)
        self.stages = nn.ModuleList()
        self.norms = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.encoders = nn.ModuleList()
        for i, dim in enumerate(dims):
            heads = _heads_for(dim)
            self.stages.append(nn.Sequential(SwinBlock(dim, heads, window, False), SwinBlock(dim, heads, window, True)))
            self.norms.append(nn.LayerNorm(dim))
            if i < len(dims) - 1:
                self.merges.append(PatchMerging(dim))
            self.encoders.append(UnetrBasicBlock(3, dim, dim, kernel_size=3, stride=1, norm_name="instance", res_block=True))

        # decoders run deepest first; the last one lands on the full-resolution stem
        self.decoders = nn.ModuleList()
        for hi, lo in zip(reversed(dims), list(reversed(dims[:-1])) + [c]):
            self.decoders.append(UnetrUpBlock(3, hi, lo, kernel_size=3, upsample_kernel_size=2, norm_name="instance", res_block=True))
        self.out = UnetOutBlock(3, c, cfg.out_classes)

    @property
    def in_channels(self) -> int:
        return self.config.in_channels

    @property
    def out_classes(self) -> int:
        return self.config.out_classes

    @property
    def required_divisor(self) -> int:
        return self.config.required_divisor

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_spatial(x, self.required_divisor, "swin_unetr")
        skips = [self.encoder0(x)]
        h = self.patch_embed(x).permute(0, 2, 3, 4, 1)
        feats = []
        for i, stage in enumerate(self.stages):
            h = stage(h)
            feats.append(self.norms[i](h).permute(0, 4, 1, 2, 3).contiguous())
            if i < len(self.merges):
                h = self.merges[i](h)
        encs = [enc(f) for enc, f in zip(self.encoders, feats)]
        skips.extend(encs[:-1])
        y = encs[-1]
        for dec in self.decoders:
            y = dec(y, skips.pop())
        return self.out(y)


class FLTClassifier(nn.Module):
    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.config = cfg
        self.net = DenseNet(
            spatial_dims=3, in_channels=cfg.in_channels, out_channels=1,
            init_features=cfg.init_features, growth_rate=cfg.growth_rate,
            block_config=cfg.block_config, bn_size=4, dropout_prob=0.0,
        )

    @property
    def in_channels(self) -> int:
        return self.config.in_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5:
            raise ShapeError(f"classifier expects (B, C, x, y, z) input, got {tuple(x.shape)}")
        return self.net(x).reshape(-1)


def _seeded(seed: int, factory):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def build_segmenter(cfg: SegmenterConfig) -> nn.Module:
    cls = UNet3D if cfg.architecture == "unet3d" else SwinUNETR3D
    model = _seeded(cfg.seed, lambda: cls(cfg))
    log.debug("built %s with %d parameters", cfg.architecture, sum(p.numel() for p in model.parameters()))
    return model


def build_classifier(cfg: ClassifierConfig) -> nn.Module:
    return _seeded(cfg.seed, lambda: FLTClassifier(cfg))


def network_kind(cfg: SegmenterConfig | ClassifierConfig) -> str:
    return "segmenter" if isinstance(cfg, SegmenterConfig) else "classifier"


def build_network(cfg: SegmenterConfig | ClassifierConfig) -> nn.Module:
    return build_segmenter(cfg) if isinstance(cfg, SegmenterConfig) else build_classifier(cfg)


def config_from_dict(kind: str, d: dict) -> SegmenterConfig | ClassifierConfig:
    if kind == "segmenter":
        return SegmenterConfig(**d)
    d = dict(d)
    if d.get("block_config") is not None:
        d["block_config"] = tuple(d["block_config"])
    return ClassifierConfig(**d)


def save_checkpoint(path: str | Path, model: nn.Module, *, epoch: int, optimizer=None, scheduler=None,
                    history: list[dict] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "kind": network_kind(cfg),
        "config": asdict(cfg),
        "epoch": int(epoch),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "history": history or [],
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, map_location: str | torch.device = "cpu") -> dict:
    payload = torch.load(str(path), map_location=map_location, weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {payload.get('format_version')}")
    return payload


def network_from_checkpoint(path: str | Path, map_location: str | torch.device = "cpu") -> nn.Module:
    payload = load_checkpoint(path, map_location)
    model = build_network(config_from_dict(payload["kind"], payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
