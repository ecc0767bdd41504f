"""Gated low-rank adapters for convolutional and transposed-convolutional layers.

Each patched layer computes ``base(z) + alpha * g * B(A(z))`` where ``A`` has
the base layer's kernel / stride / padding and maps ``c_in -> r`` channels,
``B`` is a 1x1 convolution ``r -> c_out`` initialised to zero, and ``g`` is a
learnable unconstrained scalar gate. Base weights (and biases) are frozen.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .errors import ApplyError, ConfigError, InjectionError, ShapeError

logger = logging.getLogger(__name__)

PATCHABLE = (nn.Conv2d, nn.ConvTranspose2d)


def _pair(v) -> tuple[int, int]:
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v)


@dataclass(frozen=True)
class LayerDescriptor:
    path: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]
    dilation: tuple[int, int] = (1, 1)
    output_padding: tuple[int, int] = (0, 0)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerDescriptor":
        fields = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**fields)

    @classmethod
    def of(cls, path: str, layer: nn.Module) -> "LayerDescriptor":
        kind = "transposed_conv" if isinstance(layer, nn.ConvTranspose2d) else "conv"
        return cls(
            path=path, kind=kind,
            in_channels=layer.in_channels, out_channels=layer.out_channels,
            kernel=_pair(layer.kernel_size), stride=_pair(layer.stride),
            padding=_pair(layer.padding), dilation=_pair(layer.dilation),
            output_padding=_pair(getattr(layer, "output_padding", 0)) if kind == "transposed_conv" else (0, 0),
        )

    def adapter_parameter_count(self, rank: int, gated: bool = True) -> int:
        kh, kw = self.kernel
        return rank * self.in_channels * kh * kw + self.out_channels * rank + int(gated)


class PatchedLayer(nn.Module):
    """A frozen conv / deconv layer plus its gated low-rank adapter pair."""

    def __init__(self, base: nn.Module, rank: int, alpha: float = 1.0, gate_init: float = 1.0,
                 use_gating: bool = True, generator: torch.Generator | None = None):
        super().__init__()
        if not isinstance(base, PATCHABLE):
            raise InjectionError(f"cannot patch layer of type {type(base).__name__}")
        self.base = base
        self.kind = "transposed_conv" if isinstance(base, nn.ConvTranspose2d) else "conv"
        self.rank = int(rank)
        self.alpha = float(alpha)
        self.use_gating = use_gating
        self.enabled = True
        c_in, c_out = base.in_channels, base.out_channels
        if self.kind == "conv":
            self.lora_A = nn.Conv2d(c_in, rank, base.kernel_size, base.stride, base.padding,
                                    base.dilation, bias=False, padding_mode=base.padding_mode)
        else:
            self.lora_A = nn.ConvTranspose2d(c_in, rank, base.kernel_size, base.stride, base.padding,
                                             base.output_padding, bias=False, dilation=base.dilation)
        self.lora_B = nn.Conv2d(rank, c_out, 1, bias=False)
        nn.init.kaiming_uniform_(self.lora_A.weight, a=math.sqrt(5), generator=generator)
        nn.init.zeros_(self.lora_B.weight)
        if use_gating:
            self.gate = nn.Parameter(torch.tensor(float(gate_init)))
        else:
            self.register_buffer("gate", torch.tensor(1.0))
        base.requires_grad_(False)

    @property
    def in_channels(self) -> int:
        return self.base.in_channels

    def extra_repr(self) -> str:
        return f"kind={self.kind}, rank={self.rank}, alpha={self.alpha}, gated={self.use_gating}"

    def delta(self, z):
        return self.lora_B(self.lora_A(z))

    def forward(self, z, output_size=None):
        if z.ndim != 4 or z.shape[1] != self.in_channels:
            raise ShapeError(f"expected input with {self.in_channels} channels, got shape {tuple(z.shape)}")
        if self.kind == "transposed_conv" and output_size is not None:
            out = self.base(z, output_size=output_size)
            delta = self.lora_B(self.lora_A(z, output_size=output_size))
        else:
            out = self.base(z)
            delta = self.delta(z) if self.enabled else None
        if not self.enabled:
            return out
        return out + (self.alpha * self.gate) * delta


def gated_forward(layer: PatchedLayer, z_prev: torch.Tensor) -> torch.Tensor:
    return layer(z_prev)


def enumerate_patchable_layers(model: nn.Module) -> list[LayerDescriptor]:
    """All conv / transposed-conv layers in registration order.

    Already-patched layers are reported by their base geometry. Grouped
    convolutions are skipped (the adapter layout assumes dense channels).
    """
    found = []
    inside_patched: list[str] = []
    for name, module in model.named_modules():
        if any(name.startswith(p + ".") for p in inside_patched):
            continue
        if isinstance(module, PatchedLayer):
            inside_patched.append(name)
            found.append(LayerDescriptor.of(name, module.base))
        elif isinstance(module, PATCHABLE) and module.groups == 1:
            found.append(LayerDescriptor.of(name, module))
    return found


def _set_submodule(root: nn.Module, path: str, new: nn.Module) -> None:
    parent_path, _, leaf = path.rpartition(".")
    parent = root.get_submodule(parent_path) if parent_path else root
    setattr(parent, leaf, new)


def state_checksum(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def module_checksum(module: nn.Module) -> str:
    if isinstance(module, PatchedGenerator):
        return state_checksum(module.base_state_dict())
    return state_checksum(module.state_dict())


class PatchedGenerator(nn.Module):
    """A generator whose conv / deconv layers carry gated adapters."""

    def __init__(self, model: nn.Module, layers: list[LayerDescriptor], rank: int, alpha: float,
                 use_gating: bool, base_checksum: str):
        super().__init__()
        self.model = model
        self.layers = list(layers)
        self.rank = rank
        self.alpha = alpha
        self.use_gating = use_gating
        self.base_checksum = base_checksum

    def forward(self, x):
        return self.model(x)

    def patched_layers(self) -> dict[str, PatchedLayer]:
        return {d.path: self.model.get_submodule(d.path) for d in self.layers}

    def gates(self) -> list[float]:
        return [layer.gate.item() for layer in self.patched_layers().values()]

    def base_state_dict(self) -> dict:
        """State of the wrapped base model under its original (unpatched) names."""
        paths = {d.path for d in self.layers}
        out = {}
        for name, tensor in self.model.state_dict().items():
            owner, _, leaf = name.rpartition(".")
            if owner in paths:
                continue  # the gate buffer of an ungated layer
            layer_path, sep, rest = name.partition(".base.")
            if sep and layer_path in paths:
                out[f"{layer_path}.{rest}"] = tensor
            elif any(name.startswith(p + ".lora_") for p in paths):
                continue
            else:
                out[name] = tensor
        return out

    @contextlib.contextmanager
    def adapters_disabled(self):
        layers = list(self.patched_layers().values())
        for layer in layers:
            layer.enabled = False
        try:
            yield self
        finally:
            for layer in layers:
                layer.enabled = True


def check_rank(desc: LayerDescriptor, rank: int) -> None:
    """Reject ranks that cannot be low-rank for this layer; warn on redundant ones.

    A rank at or above ``max(c_in, c_out)`` is rejected. Layers with a 3-channel
    side (RGB stem / head) accept ranks above 3: their delta simply cannot
    reach full adapter rank, which is harmless.
    """
    lo = min(desc.in_channels, desc.out_channels)
    hi = max(desc.in_channels, desc.out_channels)
    if rank >= hi:
        raise InjectionError(
            f"rank {rank} is not below the channel count of layer {desc.path!r} "
            f"({desc.in_channels} -> {desc.out_channels})")
    if rank >= lo:
        logger.debug("rank %d >= min channels %d at %s", rank, lo, desc.path)


def inject(model: nn.Module, rank: int = 8, alpha: float = 1.0, gate_init: float = 1.0, seed: int = 0,
           use_gating: bool = True, inplace: bool = False, paths=None) -> PatchedGenerator:
    """Wrap every patchable layer of ``model`` with a gated adapter.

    The returned model is an exact functional copy of ``model`` (``B = 0``).
    With ``inplace=False`` the input model is left untouched.
    """
    if rank < 1:
        raise InjectionError("rank must be >= 1")
    if not alpha > 0:
        raise InjectionError("alpha must be > 0")
    if isinstance(model, PatchedGenerator):
        raise InjectionError("model is already patched")
    base_checksum = module_checksum(model)
    target = model if inplace else copy.deepcopy(model)
    target.eval()
    target.requires_grad_(False)
    descs = enumerate_patchable_layers(target)
    if paths is not None:
        wanted = set(paths)
        descs = [d for d in descs if d.path in wanted]
    for d in descs:
        check_rank(d, rank)
    gen = torch.Generator().manual_seed(seed)
    for d in descs:
        layer = PatchedLayer(target.get_submodule(d.path), rank, alpha, gate_init, use_gating, gen)
        _set_submodule(target, d.path, layer)
    return PatchedGenerator(target, descs, rank, alpha, use_gating, base_checksum)


def trainable_parameters(patched: PatchedGenerator) -> list[nn.Parameter]:
    params = []
    for layer in patched.patched_layers().values():
        params += [layer.lora_A.weight, layer.lora_B.weight]
        if layer.use_gating:
            params.append(layer.gate)
    return params


def adapter_parameter_count(layers, rank: int, gated: bool = True) -> int:
    """Closed form: sum over layers of r*c_in*kh*kw + c_out*r + 1 (gate)."""
    return sum(d.adapter_parameter_count(rank, gated) for d in layers)


# -- patch artefact -----------------------------------------------------------

@dataclass
class LoraBlockParams:
    A: torch.Tensor
    B: torch.Tensor
    gate: float
    rank: int
    alpha: float


@dataclass
class PatchManifest:
    rank: int
    alpha: float
    mode: str = "bypass"
    base_model_checksum: str = ""
    config_hash: str = ""
    use_gating: bool = True
    config: dict = field(default_factory=dict)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class LoraPatch:
    layers: list[LayerDescriptor]
    blocks: dict[str, LoraBlockParams]
    manifest: PatchManifest

    def validate(self) -> None:
        if [d.path for d in self.layers] != list(self.blocks):
            raise ConfigError("patch layer list and block map disagree")
        if self.manifest.mode not in ("bypass", "defensive"):
            raise ConfigError(f"unknown patch mode {self.manifest.mode!r}")
        for d in self.layers:
            blk = self.blocks[d.path]
            if blk.rank != self.manifest.rank or blk.alpha != self.manifest.alpha:
                raise ConfigError(f"block {d.path!r} rank/alpha differ from manifest")
            if blk.A.shape != adapter_shapes(d, blk.rank)[0] or blk.B.shape != adapter_shapes(d, blk.rank)[1]:
                raise ConfigError(f"block {d.path!r} tensors do not match layer geometry")

    def num_parameters(self) -> int:
        return adapter_parameter_count(self.layers, self.manifest.rank, self.manifest.use_gating)


def adapter_shapes(desc: LayerDescriptor, rank: int) -> tuple[tuple, tuple]:
    kh, kw = desc.kernel
    if desc.kind == "conv":
        a = (rank, desc.in_channels, kh, kw)
    else:
        a = (desc.in_channels, rank, kh, kw)
    return torch.Size(a), torch.Size((desc.out_channels, rank, 1, 1))


def extract_patch(patched: PatchedGenerator, mode: str = "bypass", config: dict | None = None) -> LoraPatch:
    blocks = {}
    for path, layer in patched.patched_layers().items():
        blocks[path] = LoraBlockParams(
            A=layer.lora_A.weight.detach().clone().float(),
            B=layer.lora_B.weight.detach().clone().float(),
            gate=float(layer.gate.detach().float().item()),
            rank=patched.rank, alpha=patched.alpha,
        )
    config = dict(config or {})
    manifest = PatchManifest(rank=patched.rank, alpha=patched.alpha, mode=mode,
                             base_model_checksum=patched.base_checksum,
                             config_hash=config_hash(config), use_gating=patched.use_gating,
                             config=config)
    patch = LoraPatch(layers=list(patched.layers), blocks=blocks, manifest=manifest)
    patch.validate()
    return patch


def apply_patch(model: nn.Module, patch: LoraPatch, inplace: bool = False) -> PatchedGenerator:
    """Insert a saved patch into ``model``.

    Geometry must match layer by layer. A differing base checksum only warns,
    so patches can be transferred deliberately.
    """
    patch.validate()
    available = {d.path: d for d in enumerate_patchable_layers(model)}
    for d in patch.layers:
        have = available.get(d.path)
        if have is None:
            raise ApplyError(f"layer {d.path!r} not found in model")
        if have != d:
            raise ApplyError(f"geometry mismatch at layer {d.path!r}: patch {d} vs model {have}")
    checksum = module_checksum(model)
    if patch.manifest.base_model_checksum and checksum != patch.manifest.base_model_checksum:
        warnings.warn("base model checksum differs from the one the patch was trained on", stacklevel=2)
    patched = inject(model, rank=patch.manifest.rank, alpha=patch.manifest.alpha,
                     use_gating=patch.manifest.use_gating, inplace=inplace,
                     paths=[d.path for d in patch.layers])
    with torch.no_grad():
        for path, layer in patched.patched_layers().items():
            blk = patch.blocks[path]
            layer.lora_A.weight.copy_(blk.A)
            layer.lora_B.weight.copy_(blk.B)
            layer.gate.fill_(blk.gate)
    return patched


def _merged_weight(layer: PatchedLayer) -> torch.Tensor:
    w = layer.base.weight.detach()
    scale = layer.alpha * layer.gate.detach().item()
    B = layer.lora_B.weight.detach()[:, :, 0, 0]
    if scale == 0.0 or not torch.any(B):
        return w.clone()
    A = layer.lora_A.weight.detach()
    if layer.kind == "conv":
        delta = torch.einsum("or,rihw->oihw", B, A)
    else:
        delta = torch.einsum("irhw,or->iohw", A, B)
    return w + scale * delta


def merge_patch(patched: PatchedGenerator) -> nn.Module:
    """Fold every adapter into its base weight and return a plain generator."""
    merged = copy.deepcopy(patched.model)
    for path in patched.patched_layers():
        layer = merged.get_submodule(path)
        base = layer.base
        with torch.no_grad():
            base.weight.copy_(_merged_weight(layer))
        _set_submodule(merged, path, base)
    return merged
