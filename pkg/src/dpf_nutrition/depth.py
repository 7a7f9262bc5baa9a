"""Monocular depth providers and the token reassembly operations of a dense
prediction transformer.

Three providers share one contract (an H x W non-negative map for an
H x W x 3 image):

* ``pretrained``: a dense depth network loaded from a checkpoint file, either a
  TorchScript module or a state dict for :class:`DensePredictionNet`;
* ``sensor_passthrough``: the depth stored on the sample;
* ``synthetic_oracle``: the analytic heightfield of a synthetic scene.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import RGBDSample, read_depth_file, write_depth_file
from .errors import ContractError, DepthLoadError, ShapeError

PROVIDER_KINDS = ("pretrained", "sensor_passthrough", "synthetic_oracle")


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ShapeError(f"depth map must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("depth values must be finite and non-negative")
        if self.normalized and values.size and values.max() > 1:
            raise ValueError("normalized depth map has values above 1")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class DepthProviderConfig:
    kind: str = "synthetic_oracle"
    weights_path: str | None = None
    fine_tune: bool = False

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise ValueError(f"unknown depth provider kind {self.kind!r}")
        if (self.kind == "pretrained") != (self.weights_path is not None):
            raise ValueError("weights_path is required for, and only for, kind='pretrained'")


# --------------------------------------------------------------------------
# token reassembly


@dataclass(frozen=True)
class TokenGrid:
    """``tokens`` is N_p x D (or B x N_p x D) in row-major grid order."""

    tokens: torch.Tensor
    grid_h: int
    grid_w: int

    @classmethod
    def for_image(cls, tokens, height: int, width: int, patch: int) -> "TokenGrid":
        return cls(torch.as_tensor(tokens), height // patch, width // patch)


def reassemble_concatenate(grid: TokenGrid) -> torch.Tensor:
    """Place each token at its grid cell: N_p x D -> (H/p) x (W/p) x D."""
    tokens = torch.as_tensor(grid.tokens)
    if tokens.ndim not in (2, 3):
        raise ShapeError(f"tokens must be N x D or B x N x D, got {tuple(tokens.shape)}")
    n, dim = tokens.shape[-2:]
    if dim <= 0 or n != grid.grid_h * grid.grid_w:
        raise ShapeError(f"{n} tokens do not fill a {grid.grid_h}x{grid.grid_w} grid")
    return tokens.reshape(*tokens.shape[:-2], grid.grid_h, grid.grid_w, dim)


class Resample(nn.Module):
    """1x1 projection D -> D' followed by a strided (transposed) convolution
    taking stride ``patch`` to stride ``target_stride``."""

    def __init__(self, in_dims: int, target_dims: int, target_stride: int, patch: int = 16):
        super().__init__()
        if target_stride <= 0 or target_dims <= 0 or in_dims <= 0:
            raise ValueError("strides and dimensions must be positive")
        if patch % target_stride and target_stride % patch:
            raise ValueError(f"stride {target_stride} is not commensurate with patch {patch}")
        self.project = nn.Conv2d(in_dims, target_dims, 1)
        if target_stride < patch:
            k = patch // target_stride
            self.spatial = nn.ConvTranspose2d(target_dims, target_dims, k, stride=k)
        elif target_stride > patch:
            self.spatial = nn.Conv2d(target_dims, target_dims, 3, stride=target_stride // patch, padding=1)
        else:
            self.spatial = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # channels-first in, channels-first out
        return self.spatial(self.project(x))


def resample(feature: torch.Tensor, target_stride: int, target_dims: int, patch: int = 16,
             module: Resample | None = None) -> torch.Tensor:
    """Resample an h x w x D feature (channels last) to stride ``target_stride``
    with ``target_dims`` channels."""
    if target_stride <= 0 or target_dims <= 0:
        raise ValueError("target_stride and target_dims must be positive")
    batched = feature.ndim == 4
    x = feature if batched else feature[None]
    if module is None:
        module = Resample(x.shape[-1], target_dims, target_stride, patch).to(x.dtype)
    out = module(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
    return out if batched else out[0]


# --------------------------------------------------------------------------
# dense prediction network


class _FusionUnit(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, skip=None):
        if skip is not None:
            x = x + skip
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


class DensePredictionNet(nn.Module):
    """A compact dense prediction transformer.

    Patch tokens go through a transformer encoder; the outputs of four encoder
    layers are reassembled into image-like maps at strides 4, 8, 16 and 32 and
    fused coarse-to-fine into a single-channel non-negative depth map.
    """

    def __init__(self, patch: int = 16, dim: int = 64, layers: int = 4, heads: int = 4,
                 features: int = 32, pos_grid: int = 24):
        super().__init__()
        self.arch = dict(patch=patch, dim=dim, layers=layers, heads=heads,
                         features=features, pos_grid=pos_grid)
        self.patch = patch
        self.embed = nn.Conv2d(3, dim, patch, stride=patch)
        self.pos = nn.Parameter(torch.randn(1, dim, pos_grid, pos_grid) * 0.02)
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(dim, heads, dim * 2, dropout=0.0, batch_first=True)
            for _ in range(layers)
        )
        self.taps = [max(0, round((k + 1) * layers / 4) - 1) for k in range(4)]
        self.strides = (4, 8, 16, 32)
        self.reassemble = nn.ModuleList(Resample(dim, features, s, patch) for s in self.strides)
        self.fuse = nn.ModuleList(_FusionUnit(features) for _ in self.strides)
        self.head = nn.Sequential(
            nn.Conv2d(features, features // 2, 3, padding=1), nn.ReLU(),
            nn.Conv2d(features // 2, 1, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        tokens = self.embed(x)
        gh, gw = tokens.shape[-2:]
        pos = F.interpolate(self.pos, size=(gh, gw), mode="bilinear", align_corners=False)
        t = (tokens + pos).flatten(2).transpose(1, 2)
        outputs = []
        for block in self.blocks:
            t = block(t)
            outputs.append(t)
        tapped = [outputs[i] for i in self.taps]
        maps = [
            module(reassemble_concatenate(TokenGrid(tok, gh, gw)).permute(0, 3, 1, 2))
            for module, tok in zip(self.reassemble, tapped)
        ]
        y = self.fuse[-1](maps[-1])
        for k in range(len(maps) - 2, -1, -1):
            y = F.interpolate(y, size=maps[k].shape[-2:], mode="bilinear", align_corners=False)
            y = self.fuse[k](y, maps[k])
        y = F.interpolate(self.head(y), size=(h, w), mode="bilinear", align_corners=False)
        return F.softplus(y)[:, 0]


def save_depth_model(model: DensePredictionNet, path) -> None:
    torch.save({"format": "dpf-depth", "arch": model.arch, "state_dict": model.state_dict()}, path)


def load_depth_model(path) -> nn.Module:
    path = Path(path)
    if not path.is_file():
        raise DepthLoadError(f"depth weights not found: {path}")
    try:
        return torch.jit.load(str(path), map_location="cpu").eval()
    except Exception:
        pass
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if not isinstance(blob, dict) or blob.get("format") != "dpf-depth":
            raise ValueError("not a depth checkpoint")
        model = DensePredictionNet(**blob["arch"])
        model.load_state_dict(blob["state_dict"])
    except Exception as exc:
        raise DepthLoadError(f"cannot load depth weights from {path}: {exc}") from exc
    return model.eval()


def _network_size(h: int, w: int, multiple: int = 32) -> tuple[int, int]:
    return max(multiple, round(h / multiple) * multiple), max(multiple, round(w / multiple) * multiple)


# --------------------------------------------------------------------------
# providers


class DepthProvider:
    """Read-only after construction; ``predict`` is safe to call concurrently."""

    def __init__(self, config: DepthProviderConfig, model: nn.Module | None = None):
        self.config = config
        self.model = model
        if config.kind == "pretrained" and model is None:
            self.model = load_depth_model(config.weights_path)

    def predict(self, rgb: np.ndarray, sample: RGBDSample | None = None) -> DepthMap:
        rgb = np.asarray(rgb, dtype=np.float32)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ShapeError(f"rgb must be HxWx3, got {rgb.shape}")
        h, w = rgb.shape[:2]
        kind = self.config.kind
        if kind == "sensor_passthrough":
            if sample is None or sample.depth is None:
                raise LookupError("sensor depth is not available for this sample")
            return DepthMap(sample.depth)
        if kind == "synthetic_oracle":
            from .synthetic import heightfield, sample_blobs

            if sample is None or sample.scene is None:
                raise LookupError("synthetic oracle needs a sample carrying its scene")
            spec = sample.scene
            hf = heightfield(sample_blobs(spec), spec.image_size).astype(np.float32)
            if hf.shape != (h, w):
                hf = _resize_map(hf, (h, w))
            return DepthMap(hf)
        x = torch.from_numpy(rgb).permute(2, 0, 1)[None]
        x = F.interpolate(x, size=_network_size(h, w), mode="bilinear", align_corners=False)
        with torch.no_grad():
            y = self.model(x)
        if y.ndim == 4:
            y = y[:, 0]
        y = F.interpolate(y[:, None], size=(h, w), mode="bilinear", align_corners=False)[0, 0]
        return DepthMap(y.clamp_min(0).numpy())


def _resize_map(arr: np.ndarray, size) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr))[None, None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].clamp_min(0).numpy()


def make_depth_provider(config: DepthProviderConfig) -> DepthProvider:
    return DepthProvider(config)


def predict_depth(rgb: np.ndarray, config: DepthProviderConfig | DepthProvider,
                  sample: RGBDSample | None = None) -> DepthMap:
    provider = config if isinstance(config, DepthProvider) else DepthProvider(config)
    return provider.predict(rgb, sample)


def attach_predicted_depth(samples, provider: DepthProvider, cache: "DepthCache | None" = None):
    """Replace each sample's depth with the provider's prediction."""
    out = []
    for s in samples:
        d = cache.get(s.dish_id, s.size) if cache is not None else None
        if d is None:
            d = provider.predict(s.rgb, s)
            if cache is not None:
                cache.put(s.dish_id, d)
        out.append(RGBDSample(s.dish_id, s.rgb, d.values, s.target, s.scene))
    return out


class DepthCache:
    """On-disk cache of predicted depth, ``<dir>/<dish_id>/depth.raw``."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def path(self, dish_id: str) -> Path:
        return self.directory / dish_id / "depth.raw"

    def get(self, dish_id: str, shape) -> DepthMap | None:
        p = self.path(dish_id)
        if not p.exists():
            return None
        return DepthMap(read_depth_file(p, tuple(shape)))

    def put(self, dish_id: str, depth: DepthMap) -> None:
        p = self.path(dish_id)
        p.parent.mkdir(parents=True, exist_ok=True)
        write_depth_file(p, depth.values)


# --------------------------------------------------------------------------
# normalization and backbone encoding


def normalize_depth(d: DepthMap, mode: str = "minmax", max_value: float | None = None) -> DepthMap:
    """Rescale to [0, 1].

    ``minmax`` is per-image; a constant map becomes all zeros.  ``fixed``
    divides by ``max_value`` and clips, which keeps absolute scale.
    Maps already flagged as normalized are returned unchanged.
    """
    if d.normalized:
        return d
    v = d.values.astype(np.float64)
    if mode == "minmax":
        lo, hi = (float(v.min()), float(v.max())) if v.size else (0.0, 0.0)
        out = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    elif mode == "fixed":
        if not max_value or max_value <= 0:
            raise ValueError("fixed normalization needs a positive max_value")
        out = np.clip(v / max_value, 0, 1)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    return DepthMap(out.astype(np.float32), normalized=True)


def depth_to_backbone_input(d: DepthMap) -> np.ndarray:
    """Replicate a normalized map into three identical channels (H x W x 3)."""
    if not d.normalized:
        raise ContractError("depth must be normalized before encoding for the backbone")
    return np.repeat(d.values[..., None], 3, axis=2)


# --------------------------------------------------------------------------
# optional fine-tuning of the pretrained provider


@dataclass(frozen=True)
class DepthFineTuneConfig:
    long_side: int = 384
    crop: int = 384
    lr0: float = 1e-5
    lr_min: float = 1e-6
    epochs: int = 60
    batch: int = 8
    seed: int = 0
    variance_focus: float = 0.5


def scale_invariant_log_loss(pred: torch.Tensor, target: torch.Tensor, lam: float = 0.5,
                             eps: float = 1e-6) -> torch.Tensor:
    """Scale-invariant log error over pixels with positive ground truth."""
    mask = target > 0
    if not mask.any():
        return pred.sum() * 0.0
    d = torch.log(pred[mask] + eps) - torch.log(target[mask] + eps)
    return (d ** 2).mean() - lam * d.mean() ** 2


def _resize_long_side(x: torch.Tensor, long_side: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    k = long_side / max(h, w)
    size = (max(1, round(h * k)), max(1, round(w * k)))
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def fine_tune_depth(model: nn.Module, pairs, config: DepthFineTuneConfig = DepthFineTuneConfig()) -> list[float]:
    """Train ``model`` on (rgb H x W x 3, depth H x W) pairs; returns per-epoch mean loss.

    Images are resized to ``long_side`` and cut into random square crops; the
    learning rate is cosine-annealed from ``lr0`` to ``lr_min``.
    """
    if not pairs:
        raise ValueError("fine-tuning needs at least one (rgb, depth) pair")
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, config.epochs), eta_min=config.lr_min)
    prepared = []
    for rgb, depth in pairs:
        x = torch.from_numpy(np.asarray(rgb, np.float32)).permute(2, 0, 1)[None]
        y = torch.from_numpy(np.asarray(depth, np.float32))[None, None]
        prepared.append((_resize_long_side(x, config.long_side)[0], _resize_long_side(y, config.long_side)[0, 0]))
    # crops cannot exceed the smallest short side after resizing
    c = min([config.crop] + [min(y.shape) for _, y in prepared])
    model.train()
    history = []
    for _ in range(config.epochs):
        order = torch.randperm(len(prepared), generator=gen).tolist()
        losses = []
        for start in range(0, len(order), config.batch):
            xs, ys = [], []
            for i in order[start:start + config.batch]:
                x, y = prepared[i]
                h, w = y.shape
                top = int(torch.randint(0, h - c + 1, (1,), generator=gen))
                left = int(torch.randint(0, w - c + 1, (1,), generator=gen))
                xs.append(x[:, top:top + c, left:left + c])
                ys.append(y[top:top + c, left:left + c])
            xb, yb = torch.stack(xs), torch.stack(ys)
            loss = scale_invariant_log_loss(model(xb), yb, config.variance_focus)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        sched.step()
        history.append(float(np.mean(losses)))
    model.eval()
    return history
