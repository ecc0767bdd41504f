"""Desk-scale stand-ins for the pretrained networks.

* :class:`ToyGenerator` - an encoder / residual / decoder image-to-image net
  in the StarGAN mould, trained to apply a fixed deterministic transform.
* :class:`FeatureEncoder` - frozen image -> vector maps used by the feature
  and semantic alignment losses. Real pretrained networks plug in through the
  ``external`` kind.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataio import Dataset
from .errors import ConfigError, DatasetError, EncoderLoadError, TrainingDivergenceError

logger = logging.getLogger(__name__)


@dataclass
class GeneratorSpec:
    input_channels: int = 3
    base_width: int = 32
    num_downsample: int = 2
    num_residual: int = 4
    num_upsample: int = 2
    output_activation: str = "tanh"
    seed: int = 0
    edge_kernel: int = 7
    norm: str = "batch"

    NORMS = ("batch", "instance")

    def validate(self) -> None:
        for name in ("input_channels", "base_width", "num_downsample", "num_upsample", "edge_kernel"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"GeneratorSpec.{name} must be positive")
        if self.num_residual < 0:
            raise ConfigError("GeneratorSpec.num_residual must be >= 0")
        if self.num_downsample != self.num_upsample:
            raise ConfigError(
                f"num_downsample ({self.num_downsample}) must equal num_upsample "
                f"({self.num_upsample}) so output resolution matches input")
        if self.output_activation != "tanh":
            raise ConfigError(f"unsupported output_activation {self.output_activation!r}")
        if self.edge_kernel % 2 == 0:
            raise ConfigError("edge_kernel must be odd")
        if self.norm not in self.NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(**d)


def _norm(kind: str, c: int) -> nn.Module:
    # Instance norm divides out each map's own energy, which makes the net
    # blind to faint full-image texture; batch norm keeps that signal.
    return nn.BatchNorm2d(c) if kind == "batch" else nn.InstanceNorm2d(c, affine=True)


class _DownBlock(nn.Module):
    def __init__(self, c_in, c_out, norm):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 4, 2, 1, bias=False)
        self.norm = _norm(norm, c_out)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class _ResidualBlock(nn.Module):
    def __init__(self, c, norm):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, 1, 1, bias=False)
        self.norm1 = _norm(norm, c)
        self.conv2 = nn.Conv2d(c, c, 3, 1, 1, bias=False)
        self.norm2 = _norm(norm, c)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class _UpBlock(nn.Module):
    def __init__(self, c_in, c_out, norm):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(c_in, c_out, 4, 2, 1, bias=False)
        self.norm = _norm(norm, c_out)

    def forward(self, x):
        return F.relu(self.norm(self.deconv(x)))


class _Stem(nn.Module):
    def __init__(self, c_in, c_out, k, norm):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, k, 1, k // 2, bias=False)
        self.norm = _norm(norm, c_out)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class _Head(nn.Module):
    def __init__(self, c_in, c_out, k):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, k, 1, k // 2)

    def forward(self, x):
        return torch.tanh(self.conv(x))


class ToyGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        self.stem = _Stem(spec.input_channels, w, spec.edge_kernel, spec.norm)
        self.down = nn.ModuleList()
        c = w
        for _ in range(spec.num_downsample):
            self.down.append(_DownBlock(c, 2 * c, spec.norm))
            c *= 2
        self.res = nn.ModuleList(_ResidualBlock(c, spec.norm) for _ in range(spec.num_residual))
        self.up = nn.ModuleList()
        for _ in range(spec.num_upsample):
            self.up.append(_UpBlock(c, c // 2, spec.norm))
            c //= 2
        self.head = _Head(c, spec.input_channels, spec.edge_kernel)

    def forward(self, x):
        h = self.stem(x)
        for block in self.down:
            h = block(h)
        for block in self.res:
            h = block(h)
        for block in self.up:
            h = block(h)
        return self.head(h)


def build_toy_generator(spec: GeneratorSpec | None = None) -> ToyGenerator:
    spec = spec or GeneratorSpec()
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        return ToyGenerator(copy.deepcopy(spec))


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    module.requires_grad_(False)
    return module


# -- transforms ---------------------------------------------------------------

@dataclass
class TransformSpec:
    """The fixed "manipulation" the toy generator learns.

    ``channel_permute``: ``order`` (default (2, 0, 1)).
    ``hue_shift``: ``degrees`` rotation around the grey axis.
    ``synthetic_attribute_overlay``: recolour towards ``color`` with weight
    ``strength * sigmoid(sharpness * (score - threshold))``. With
    ``key="texture"`` (default) the score is the local RMS of fine luma
    detail (``detail_sigma``, pooled over ``pool_sigma``), so detailed
    regions such as outlines are restyled and flat skin is left alone. With
    ``key="luma"`` the score is ``-luma`` (dark regions are recoloured).
    """

    kind: str = "channel_permute"
    parameters: dict = field(default_factory=dict)

    KINDS = ("channel_permute", "hue_shift", "synthetic_attribute_overlay")

    def validate(self) -> None:
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        return cls(kind=d.get("kind", "channel_permute"), parameters=dict(d.get("parameters", {})))


def apply_transform(images: torch.Tensor, spec: TransformSpec) -> torch.Tensor:
    """Deterministic target for a batch ``(N, 3, H, W)`` in [-1, 1]."""
    spec.validate()
    p = spec.parameters
    if spec.kind == "channel_permute":
        order = list(p.get("order", (2, 0, 1)))
        if sorted(order) != [0, 1, 2]:
            raise ConfigError(f"channel order must permute (0, 1, 2), got {order}")
        return images[:, order]
    if spec.kind == "hue_shift":
        theta = math.radians(float(p.get("degrees", 120.0)))
        c, s = math.cos(theta), math.sin(theta)
        k = 1.0 / 3.0
        r = math.sqrt(k)
        # Rodrigues rotation about the (1, 1, 1) axis.
        rot = torch.tensor([
            [c + k * (1 - c), k * (1 - c) - r * s, k * (1 - c) + r * s],
            [k * (1 - c) + r * s, c + k * (1 - c), k * (1 - c) - r * s],
            [k * (1 - c) - r * s, k * (1 - c) + r * s, c + k * (1 - c)],
        ], dtype=images.dtype)
        return torch.einsum("ij,njhw->nihw", rot, images).clamp(-1, 1)
    key = p.get("key", "texture")
    color = torch.tensor(p.get("color", (0.9, 0.7, -0.6)), dtype=images.dtype).view(1, 3, 1, 1)
    strength = float(p.get("strength", 0.9))
    luma = (0.299 * images[:, 0] + 0.587 * images[:, 1] + 0.114 * images[:, 2]).unsqueeze(1)
    if key == "texture":
        detail = luma - gaussian_blur(luma, float(p.get("detail_sigma", 1.0)))
        score = (gaussian_blur(detail * detail, float(p.get("pool_sigma", 2.0))) + 1e-12).sqrt()
        threshold, sharpness = float(p.get("threshold", 0.025)), float(p.get("sharpness", 250.0))
    elif key == "luma":
        score = -luma
        threshold, sharpness = float(p.get("threshold", 0.2)), float(p.get("sharpness", 12.0))
    else:
        raise ConfigError(f"unknown overlay key {key!r}")
    m = strength * torch.sigmoid((score - threshold) * sharpness)
    return ((1 - m) * images + m * color).clamp(-1, 1)


def gaussian_blur(images: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with replicate padding, per channel."""
    if sigma <= 0:
        raise ConfigError("sigma must be > 0")
    r = max(1, math.ceil(3 * sigma))
    k = torch.exp(-torch.arange(-r, r + 1, dtype=images.dtype) ** 2 / (2 * sigma * sigma))
    k = k / k.sum()
    c = images.shape[1]
    x = F.pad(images, (r, r, r, r), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


@torch.no_grad()
def evaluate_mse(gen: nn.Module, data: Dataset, transform: TransformSpec, batch_size: int = 32) -> float:
    total, count = 0.0, 0
    was_training = gen.training
    gen.eval()
    for batch in data.batches(batch_size):
        err = (gen(batch) - apply_transform(batch, transform)) ** 2
        total += err.sum().item()
        count += err.numel()
    gen.train(was_training)
    return total / count


def train_toy_generator(gen: ToyGenerator, data: Dataset, transform: TransformSpec, epochs: int = 20,
                        batch_size: int = 16, learning_rate: float = 2e-3, seed: int = 0,
                        log_every: int = 0, noise_augment: float = 0.0,
                        noise_fraction: float = 0.5) -> ToyGenerator:
    """Supervised regression of ``gen(x)`` onto ``apply_transform(x)``.

    With ``noise_augment > 0`` a ``noise_fraction`` share of every batch gets
    random-sign pixel noise of amplitude ``U(0, noise_augment)`` before both
    the forward pass and the target, so the net also learns the transform
    slightly off the clean image distribution.

    Trains in place and returns ``gen``; per-batch losses land in
    ``gen.loss_trace``.
    """
    if len(data) == 0:
        raise DatasetError("cannot train on an empty dataset")
    transform.validate()
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if noise_augment < 0 or not 0 <= noise_fraction <= 1:
        raise ConfigError("noise_augment must be >= 0 and noise_fraction in [0, 1]")
    gen.loss_trace = []
    if epochs == 0:
        return gen
    g = torch.Generator().manual_seed(seed)
    steps = epochs * math.ceil(len(data) / batch_size)
    opt = torch.optim.Adam(gen.parameters(), lr=learning_rate, betas=(0.5, 0.999))
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=learning_rate, total_steps=steps)
    gen.train()
    for epoch in range(epochs):
        for batch in data.batches(batch_size, shuffle=True, generator=g):
            if noise_augment > 0:
                batch = _augment(batch, noise_augment, noise_fraction, g)
            loss = F.mse_loss(gen(batch), apply_transform(batch, transform))
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite generator loss at epoch {epoch}", gen.loss_trace)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            gen.loss_trace.append(loss.item())
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d/%d loss %.5f", epoch + 1, epochs, gen.loss_trace[-1])
    gen.eval()
    return gen


def _augment(batch: torch.Tensor, amplitude: float, fraction: float, g: torch.Generator) -> torch.Tensor:
    k = round(len(batch) * fraction)
    if k == 0:
        return batch
    sign = torch.randint(0, 2, batch[:k].shape, generator=g).to(batch.dtype) * 2 - 1
    scale = torch.rand(k, 1, 1, 1, generator=g, dtype=batch.dtype) * amplitude
    return torch.cat([(batch[:k] + sign * scale).clamp(-1, 1), batch[k:]])


# -- encoders -----------------------------------------------------------------

class FeatureEncoder(nn.Module):
    """Frozen image -> feature-vector map. Parameters never require grad."""

    def __init__(self, network: nn.Module, out_dim: int, kind: str, config: dict | None = None):
        super().__init__()
        self.network = network
        self.out_dim = out_dim
        self.kind = kind
        self.config = config or {}
        freeze(self)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def train(self, mode: bool = True):
        # Stays in eval mode whatever the caller asks for.
        return super().train(False)

    def forward(self, x):
        return self.network(x).flatten(1)


def _random_cnn(out_dim: int, width: int = 32) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(3, width, 3, 2, 1), nn.LeakyReLU(0.2),
        nn.Conv2d(width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
        nn.Conv2d(2 * width, 4 * width, 3, 2, 1), nn.LeakyReLU(0.2),
        nn.Conv2d(4 * width, out_dim, 3, 1, 1),
        nn.AdaptiveAvgPool2d(1),
    )


def _load_external(weights, module):
    if module is not None:
        return module
    if weights is None:
        raise EncoderLoadError("external encoder needs a weights path or a module")
    path = Path(weights)
    if not path.is_file():
        raise EncoderLoadError(f"encoder weights not found: {path}")
    try:
        return torch.jit.load(str(path), map_location="cpu")
    except Exception as exc:
        raise EncoderLoadError(f"cannot load encoder weights {path}: {exc}") from exc


def _probe_dim(network: nn.Module, image_size: int) -> int:
    with torch.no_grad():
        return network(torch.zeros(1, 3, image_size, image_size)).flatten(1).shape[1]


def build_feature_extractor(kind: str = "random_frozen_cnn", out_dim: int = 512, seed: int = 3,
                            weights: str | None = None, module: nn.Module | None = None,
                            image_size: int = 64) -> FeatureEncoder:
    """Image feature map for the feature-alignment loss.

    ``external`` takes a TorchScript archive (or an in-memory module), e.g. a
    classifier truncated before its classification layer. Such networks may
    need their own input normalisation; stand-ins consume [-1, 1] directly.
    """
    if kind == "random_frozen_cnn":
        if out_dim <= 0:
            raise ConfigError("out_dim must be positive")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = _random_cnn(out_dim)
        return FeatureEncoder(net, out_dim, kind, {"kind": kind, "out_dim": out_dim, "seed": seed})
    if kind == "external":
        net = _load_external(weights, module)
        return FeatureEncoder(net, _probe_dim(net, image_size), kind,
                              {"kind": kind, "weights": str(weights) if weights else None})
    raise ConfigError(f"unknown feature extractor kind {kind!r}")


class _Projected(nn.Module):
    def __init__(self, backbone: nn.Module, in_dim: int, out_dim: int):
        super().__init__()
        self.backbone = backbone
        self.proj = nn.Linear(in_dim, out_dim, bias=False)
        nn.init.normal_(self.proj.weight, std=1.0 / math.sqrt(in_dim))

    def forward(self, x):
        return self.proj(self.backbone(x).flatten(1))


def build_semantic_encoder(kind: str = "random_projection_head", out_dim: int = 256, seed: int = 5,
                           feature_dim: int = 512, weights: str | None = None,
                           module: nn.Module | None = None, image_size: int = 64) -> FeatureEncoder:
    """Semantic embedding for the semantic-alignment loss.

    ``random_projection_head`` is a frozen random CNN followed by a fixed
    random linear projection to ``out_dim``.
    """
    if kind == "random_projection_head":
        if out_dim <= 0 or feature_dim <= 0:
            raise ConfigError("out_dim and feature_dim must be positive")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = _Projected(_random_cnn(feature_dim), feature_dim, out_dim)
        return FeatureEncoder(net, out_dim, kind,
                              {"kind": kind, "out_dim": out_dim, "seed": seed, "feature_dim": feature_dim})
    if kind == "external":
        net = _load_external(weights, module)
        return FeatureEncoder(net, _probe_dim(net, image_size), kind,
                              {"kind": kind, "weights": str(weights) if weights else None})
    raise ConfigError(f"unknown semantic encoder kind {kind!r}")


def spec_dict(spec) -> dict:
    return asdict(spec)
