"""RGB-D fusion network: twin feature pyramids, cross-modal attention,
progressive multi-scale fusion and five regression heads."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torchvision
from torch import nn

from .dataset import NUTRIENTS, NutrientVector, RGBDSample
from .depth import DepthMap, depth_to_backbone_input, normalize_depth
from .errors import ConfigError, ContractError, ShapeError

ABLATION_MODES = ("rgb_only", "depth_only", "direct_fusion", "multiscale", "multiscale_cab")
ABLATION_INDEX = {
    "(a)": "rgb_only",
    "(b)": "depth_only",
    "(c)": "direct_fusion",
    "(d)": "multiscale",
    "(e)": "multiscale_cab",
}
PYRAMID_STRIDES = (4, 4, 8, 16, 32)


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "resnet101"
    image_size: tuple[int, int] | None = (336, 448)
    head_hidden: int = 2048
    ablation_mode: str = "multiscale_cab"
    # what the multi-scale recursion refines: the previous fused map or the previous CAB output
    recursion_input: str = "fused"
    shared_activation: str = "relu"
    depth_norm: str = "minmax"
    depth_max: float | None = None
    backbone_weights: str | None = None

    def __post_init__(self):
        if self.head_hidden <= 0:
            raise ConfigError("must be positive", "model.head_hidden")
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(f"unknown mode {self.ablation_mode!r}", "model.ablation_mode")
        if self.recursion_input not in ("fused", "raw"):
            raise ConfigError("must be 'fused' or 'raw'", "model.recursion_input")
        if self.shared_activation not in ("relu", "none"):
            raise ConfigError("must be 'relu' or 'none'", "model.shared_activation")
        if self.depth_norm not in ("minmax", "fixed"):
            raise ConfigError("must be 'minmax' or 'fixed'", "model.depth_norm")
        if self.depth_norm == "fixed" and not (self.depth_max and self.depth_max > 0):
            raise ConfigError("fixed depth normalization needs a positive depth_max", "model.depth_max")
        if self.image_size is not None:
            object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}", "model.backbone")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size) if self.image_size else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("image_size") is not None:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# backbones


class _BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(y)) + self.shortcut(x))


class SmallResNet(nn.Module):
    """Residual pyramid with the standard stride table and configurable widths."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 96, 128)):
        super().__init__()
        self.channels = tuple(channels)
        self.strides = PYRAMID_STRIDES
        c = self.channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c[0], 3, 2, 1, bias=False), nn.BatchNorm2d(c[0]), nn.ReLU(),
            nn.MaxPool2d(3, 2, 1),
        )
        self.stages = nn.ModuleList(
            _BasicBlock(c[i - 1], c[i], 1 if i == 1 else 2) for i in range(1, 5)
        )

    def forward(self, x) -> list[torch.Tensor]:
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats


class TorchvisionResNet(nn.Module):
    """Stem output plus the four residual stages of a torchvision ResNet."""

    def __init__(self, name: str, weights_path: str | None = None):
        super().__init__()
        net = getattr(torchvision.models, name)(weights=None)
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state.get("state_dict", state), strict=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.channels = (64, 256, 512, 1024, 2048) if name != "resnet18" else (64, 64, 128, 256, 512)
        self.strides = PYRAMID_STRIDES

    def forward(self, x) -> list[torch.Tensor]:
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats


BACKBONES = {
    "resnet101": lambda weights=None: TorchvisionResNet("resnet101", weights),
    "resnet50": lambda weights=None: TorchvisionResNet("resnet50", weights),
    "resnet18": lambda weights=None: TorchvisionResNet("resnet18", weights),
    "small": lambda weights=None: SmallResNet((16, 32, 64, 96, 128)),
    "tiny": lambda weights=None: SmallResNet((4, 4, 8, 8, 8)),
}


def build_backbone(name: str, weights_path: str | None = None) -> nn.Module:
    try:
        factory = BACKBONES[name]
    except KeyError:
        raise ConfigError(f"unknown backbone {name!r}", "model.backbone") from None
    return factory(weights_path)


def extract_pyramid(backbone: nn.Module, x: torch.Tensor) -> list[torch.Tensor]:
    """Five feature levels, stride 4, 4, 8, 16, 32."""
    return backbone(x)


# --------------------------------------------------------------------------
# cross-modal attention


class CrossModalAttention(nn.Module):
    """Shared channel and spatial attention computed from ``r + d``, applied to
    both modalities before concatenation and a 2C -> C projection.

    With ``use_attention=False`` the gates are skipped and the block reduces to
    concatenation plus a 1x1 convolution.
    """

    def __init__(self, channels: int, use_attention: bool = True):
        super().__init__()
        self.use_attention = use_attention
        if use_attention:
            self.ca_conv = nn.Conv2d(channels, channels, 1, bias=False)
            self.ca_bn = nn.BatchNorm2d(channels)
            self.sa_conv = nn.Conv2d(1, 1, 3, padding=1, bias=False)
            self.sa_bn = nn.BatchNorm2d(1)
        self.proj = nn.Conv2d(2 * channels, channels, 1)

    @staticmethod
    def _check(r, d):
        if r.shape != d.shape:
            raise ShapeError(f"modality shapes differ: {tuple(r.shape)} vs {tuple(d.shape)}")

    def channel_attention(self, r, d) -> torch.Tensor:
        """B x C x 1 x 1 gate in (0, 1)."""
        self._check(r, d)
        s = (r + d).mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(F.relu(self.ca_bn(self.ca_conv(s))))

    def spatial_attention(self, r, d) -> torch.Tensor:
        """B x 1 x H x W gate in (0, 1)."""
        self._check(r, d)
        s = (r + d).mean(dim=1, keepdim=True)
        return torch.sigmoid(F.relu(self.sa_bn(self.sa_conv(s))))

    def gate(self, r, d, ca, sa) -> torch.Tensor:
        return self.proj(torch.cat([r * ca * sa, d * ca * sa], dim=1))

    def forward(self, r, d) -> torch.Tensor:
        self._check(r, d)
        if not self.use_attention:
            return self.proj(torch.cat([r, d], dim=1))
        return self.gate(r, d, self.channel_attention(r, d), self.spatial_attention(r, d))


def channel_attention(block: CrossModalAttention, r, d):
    return block.channel_attention(r, d)


def spatial_attention(block: CrossModalAttention, r, d):
    return block.spatial_attention(r, d)


def cab_fuse(block: CrossModalAttention, r, d):
    return block(r, d)


# --------------------------------------------------------------------------
# multi-scale fusion


class Bottleneck(nn.Module):
    """1x1 reduce, strided 3x3, 1x1 expand, with a strided projection shortcut."""

    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        mid = max(1, cout // 4)
        self.body = nn.Sequential(
            nn.Conv2d(cin, mid, 1, bias=False), nn.BatchNorm2d(mid), nn.ReLU(),
            nn.Conv2d(mid, mid, 3, stride, 1, bias=False), nn.BatchNorm2d(mid), nn.ReLU(),
            nn.Conv2d(mid, cout, 1, bias=False), nn.BatchNorm2d(cout),
        )
        self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        return F.relu(self.body(x) + self.shortcut(x))


class MultiScaleFusion(nn.Module):
    """F_0 = C_0, F_i = C_i + Res_i(F_{i-1}) (or Res_i(C_{i-1}) with ``recursion_input='raw'``)."""

    def __init__(self, channels: Sequence[int], strides: Sequence[int] = PYRAMID_STRIDES,
                 recursion_input: str = "fused"):
        super().__init__()
        self.recursion_input = recursion_input
        self.res = nn.ModuleList(
            Bottleneck(channels[i - 1], channels[i], strides[i] // strides[i - 1])
            for i in range(1, len(channels))
        )

    def forward(self, fused_levels: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(fused_levels) != len(self.res) + 1:
            raise ShapeError(f"expected {len(self.res) + 1} levels, got {len(fused_levels)}")
        out = [fused_levels[0]]
        for i, block in enumerate(self.res, start=1):
            prev = out[-1] if self.recursion_input == "fused" else fused_levels[i - 1]
            out.append(fused_levels[i] + block(prev))
        return out


def multiscale_fuse(module: MultiScaleFusion, fused_levels) -> torch.Tensor:
    return module(fused_levels)[-1]


# --------------------------------------------------------------------------
# full model


class FusionNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        mode = config.ablation_mode
        self.uses_rgb = mode != "depth_only"
        self.uses_depth = mode != "rgb_only"
        self.rgb_backbone = build_backbone(config.backbone, config.backbone_weights) if self.uses_rgb else None
        self.depth_backbone = build_backbone(config.backbone, config.backbone_weights) if self.uses_depth else None
        ch = (self.rgb_backbone or self.depth_backbone).channels
        self.channels = ch
        self.multiscale = mode in ("multiscale", "multiscale_cab")
        if self.multiscale:
            self.fusers = nn.ModuleList(
                CrossModalAttention(c, use_attention=mode == "multiscale_cab") for c in ch
            )
            self.fusion = MultiScaleFusion(ch, PYRAMID_STRIDES, config.recursion_input)
        feat_dim = 2 * ch[-1] if mode == "direct_fusion" else ch[-1]
        self.shared = nn.Linear(feat_dim, config.head_hidden)
        self.heads = nn.ModuleList(nn.Linear(config.head_hidden, 1) for _ in NUTRIENTS)
        # per-task output units, set from training targets so heads regress O(1) values
        self.register_buffer("output_scale", torch.ones(len(NUTRIENTS)))

    def _check_inputs(self, rgb, depth):
        size = self.config.image_size
        for name, x, needed in (("rgb", rgb, self.uses_rgb), ("depth", depth, self.uses_depth)):
            if not needed:
                continue
            if x is None:
                raise ContractError(f"mode {self.config.ablation_mode} requires a {name} input")
            if x.ndim != 4 or x.shape[1] != 3:
                raise ContractError(f"{name} must be B x 3 x H x W, got {tuple(x.shape)}")
            if size is not None and tuple(x.shape[-2:]) != size:
                raise ContractError(f"{name} size {tuple(x.shape[-2:])} != configured {size}")

    def forward_features(self, rgb: torch.Tensor | None, depth: torch.Tensor | None = None) -> dict:
        self._check_inputs(rgb, depth)
        feats: dict[str, torch.Tensor] = {}
        if self.uses_rgb:
            for i, t in enumerate(extract_pyramid(self.rgb_backbone, rgb)):
                feats[f"R{i}"] = t
        if self.uses_depth:
            for i, t in enumerate(extract_pyramid(self.depth_backbone, depth)):
                feats[f"D{i}"] = t
        mode = self.config.ablation_mode
        if self.multiscale:
            cs = [fuser(feats[f"R{i}"], feats[f"D{i}"]) for i, fuser in enumerate(self.fusers)]
            fs = self.fusion(cs)
            for i in range(5):
                feats[f"C{i}"], feats[f"F{i}"] = cs[i], fs[i]
            pooled = fs[-1].mean(dim=(2, 3))
        elif mode == "direct_fusion":
            pooled = torch.cat([feats["R4"].mean(dim=(2, 3)), feats["D4"].mean(dim=(2, 3))], dim=1)
        else:
            pooled = feats["R4" if self.uses_rgb else "D4"].mean(dim=(2, 3))
        hidden = self.shared(pooled)
        if self.config.shared_activation == "relu":
            hidden = F.relu(hidden)
        out = torch.cat([head(hidden) for head in self.heads], dim=1) * self.output_scale
        feats.update(pooled=pooled, hidden=hidden, out=out)
        return feats

    def forward(self, rgb: torch.Tensor | None, depth: torch.Tensor | None = None) -> torch.Tensor:
        """Raw B x 5 predictions in nutrient units (no output nonlinearity)."""
        return self.forward_features(rgb, depth)["out"]

    def default_cam_layer(self, level: int = 4) -> str:
        if self.multiscale:
            return f"F{level}"
        return f"R{level}" if self.uses_rgb else f"D{level}"


# --------------------------------------------------------------------------
# sample preparation and prediction


def depth_input(depth: np.ndarray, config: ModelConfig) -> np.ndarray:
    d = normalize_depth(DepthMap(depth), config.depth_norm, config.depth_max)
    return depth_to_backbone_input(d)


def prepare_batch(samples: Sequence[RGBDSample], config: ModelConfig, dtype=torch.float32):
    """Stack samples into (rgb, depth, targets) tensors for the configured mode."""
    mode = config.ablation_mode
    rgb = depth = None
    if mode != "depth_only":
        rgb = torch.from_numpy(np.stack([s.rgb for s in samples])).permute(0, 3, 1, 2).to(dtype)
    if mode != "rgb_only":
        missing = [s.dish_id for s in samples if s.depth is None]
        if missing:
            raise ContractError(f"mode {mode} needs depth; missing for {missing[:3]}")
        depth = torch.from_numpy(np.stack([depth_input(s.depth, config) for s in samples]))
        depth = depth.permute(0, 3, 1, 2).to(dtype)
    targets = torch.from_numpy(np.stack([s.target.as_array() for s in samples])).to(dtype)
    return rgb, depth, targets


def build_model(config: ModelConfig, seed: int | None = None) -> FusionNet:
    if seed is not None:
        torch.manual_seed(seed)
    return FusionNet(config)


def predict_nutrients(model: FusionNet, samples: Sequence[RGBDSample]) -> list[NutrientVector]:
    """Predictions clamped at zero for reporting."""
    was_training = model.training
    model.eval()
    try:
        rgb, depth, _ = prepare_batch(samples, model.config, next(model.parameters()).dtype)
        with torch.no_grad():
            out = model(rgb, depth).double().clamp_min(0).numpy()
    finally:
        model.train(was_training)
    return [NutrientVector.from_array(row) for row in out]


def parameter_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
