"""Adversarial fine-tuning of a LoRA patch (bi-level min-max).

Outer loop: Adam on the adapter parameters only. Inner loop: PGD against the
*current* patched generator, pushing its output away from the desired output
``y`` (the frozen base output, watermarked in defensive mode).

Loss, with every squared norm taken as a mean over elements::

    L_pix = |M_p(x) - y|^2 + |M_p(x_adv) - y|^2
    L_img = |F(M_p(x)) - F(y)|^2 + |F(M_p(x_adv)) - F(y)|^2
    L_sem = |E(M_p(x)) - E(y)|^2 + |E(M_p(x_adv)) - E(y)|^2
    L     = L_pix + lambda1 * L_img + lambda2 * L_sem
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .attacks import AttackSpec, ConsistencyObjective, per_sample_mse, pgd
from .dataio import Dataset, from_uint8, to_uint8
from .errors import ConfigError, DatasetError, ShapeError, TrainingDivergenceError
from .model_zoo import FeatureEncoder, build_feature_extractor, build_semantic_encoder, freeze
from .surgery import LoraPatch, PatchedGenerator, extract_patch, inject, module_checksum, trainable_parameters
from .watermark import WatermarkSpec, apply_watermark

logger = logging.getLogger(__name__)

MODES = ("bypass", "defensive")


def _inner_default() -> AttackSpec:
    return AttackSpec(epsilon=0.05, steps=10, step_size=0.01, random_start=True, objective="break_consistency")


@dataclass
class FinetuneConfig:
    """Fine-tuning hyper-parameters.

    ``epsilon`` is authoritative for the inner attack radius; ``inner_attack``
    supplies steps, step size and the rest. ``adversarial=False`` drops the
    adversarial consistency term (control runs). ``use_mmfa=False`` zeroes
    both feature-loss weights.
    """

    rank: int = 8
    alpha: float = 1.0
    gate_init: float = 1.0
    epsilon: float = 0.05
    lambda1: float = 0.1
    lambda2: float = 0.1
    learning_rate: float = 1e-2
    batch_size: int = 4
    epochs: int = 1
    mode: str = "bypass"
    inner_attack: AttackSpec = field(default_factory=_inner_default)
    use_gating: bool = True
    use_mmfa: bool = True
    adversarial: bool = True
    inner_full_loss: bool = False
    seed: int = 0
    divergence_threshold: float = 1e6
    raise_on_divergence: bool = True

    def __post_init__(self):
        if isinstance(self.inner_attack, dict):
            self.inner_attack = AttackSpec.from_dict(self.inner_attack)
        self.validate()

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")

    @property
    def weights(self) -> tuple[float, float]:
        return (self.lambda1, self.lambda2) if self.use_mmfa else (0.0, 0.0)

    def attack_spec(self) -> AttackSpec:
        return replace(self.inner_attack, epsilon=self.epsilon, objective="break_consistency")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        return cls(**d)


# -- losses -------------------------------------------------------------------

def _msq(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def pixel_loss(out_benign, out_adv, y) -> torch.Tensor:
    loss = _msq(out_benign, y)
    if out_adv is not None:
        loss = loss + _msq(out_adv, y)
    return loss


def _encoded_pair_loss(encoder: nn.Module, out_benign, out_adv, y) -> torch.Tensor:
    parts = [out_benign, y] if out_adv is None else [out_benign, out_adv, y]
    feats = encoder(torch.cat(parts)).chunk(len(parts))
    target = feats[-1].detach()
    loss = _msq(feats[0], target)
    if out_adv is not None:
        loss = loss + _msq(feats[1], target)
    return loss


def image_feature_loss(out_benign, out_adv, y, feature_encoder: nn.Module) -> torch.Tensor:
    return _encoded_pair_loss(feature_encoder, out_benign, out_adv, y)


def semantic_feature_loss(out_benign, out_adv, y, semantic_encoder: nn.Module) -> torch.Tensor:
    return _encoded_pair_loss(semantic_encoder, out_benign, out_adv, y)


class LossTerms(NamedTuple):
    pix: torch.Tensor
    img: torch.Tensor
    sem: torch.Tensor
    total: torch.Tensor


def loss_terms(out_benign, out_adv, y, feature_encoder=None, semantic_encoder=None,
               lambda1: float = 0.1, lambda2: float = 0.1) -> LossTerms:
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError("loss weights must be >= 0")
    zero = out_benign.new_zeros(())
    pix = pixel_loss(out_benign, out_adv, y)
    img = image_feature_loss(out_benign, out_adv, y, feature_encoder) if lambda1 and feature_encoder else zero
    sem = semantic_feature_loss(out_benign, out_adv, y, semantic_encoder) if lambda2 and semantic_encoder else zero
    return LossTerms(pix, img, sem, pix + lambda1 * img + lambda2 * sem)


def total_loss(out_benign, out_adv, y, feature_encoder, semantic_encoder,
               lambda1: float = 0.1, lambda2: float = 0.1) -> torch.Tensor:
    return loss_terms(out_benign, out_adv, y, feature_encoder, semantic_encoder, lambda1, lambda2).total


def _feature_penalty(feature_encoder, semantic_encoder, lambda1, lambda2) -> Callable:
    """Per-sample feature terms for an inner attack that uses the full loss."""

    def extra(out, y):
        value = out.new_zeros(out.shape[0])
        for enc, lam in ((feature_encoder, lambda1), (semantic_encoder, lambda2)):
            if lam and enc is not None:
                value = value + lam * per_sample_mse(enc(out), enc(y).detach())
        return value

    return extra


# -- trace --------------------------------------------------------------------

@dataclass
class TraceRecord:
    iteration: int
    l_pix: float
    l_img: float
    l_sem: float
    l_total: float
    gates: list[float]
    finite: bool = True


@dataclass
class TrainTrace:
    records: list[TraceRecord] = field(default_factory=list)
    diverged: bool = False

    def __len__(self):
        return len(self.records)

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)

    @property
    def all_finite(self) -> bool:
        return all(r.finite for r in self.records)

    def totals(self) -> list[float]:
        return [r.l_total for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "L_pix", "L_img", "L_sem", "L_total", "min_gate", "max_gate"])
        for r in self.records:
            gates = r.gates or [float("nan")]
            w.writerow([r.iteration, f"{r.l_pix:.6g}", f"{r.l_img:.6g}", f"{r.l_sem:.6g}",
                        f"{r.l_total:.6g}", f"{min(gates):.6g}", f"{max(gates):.6g}"])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path


# -- training loop ------------------------------------------------------------

def desired_output(base_model: nn.Module, x: torch.Tensor, watermark: WatermarkSpec | None = None) -> torch.Tensor:
    with torch.no_grad():
        y = base_model(x)
        if watermark is not None:
            y = apply_watermark(y, watermark)
    return y.detach()


def default_encoders(image_size: int = 64) -> tuple[FeatureEncoder, FeatureEncoder]:
    return (build_feature_extractor(image_size=image_size),
            build_semantic_encoder(image_size=image_size))


def run_finetune(base_model: nn.Module, dataset: Dataset, watermark: WatermarkSpec | None = None,
                 config: FinetuneConfig | None = None, feature_encoder: FeatureEncoder | None = None,
                 semantic_encoder: FeatureEncoder | None = None, return_model: bool = False,
                 progress: Callable[[TraceRecord], None] | None = None):
    """Train a patch for ``base_model``; returns ``(patch, trace)``.

    With ``return_model=True`` the patched generator is appended to the tuple.
    The base model and both encoders are left bit-identical.
    """
    config = config or FinetuneConfig()
    config.validate()
    if len(dataset) == 0:
        raise DatasetError("cannot fine-tune on an empty dataset")
    if config.mode == "defensive" and watermark is None:
        raise ConfigError("defensive mode needs a watermark")
    if config.mode == "bypass" and watermark is not None:
        raise ConfigError("a watermark only makes sense in defensive mode")

    freeze(base_model)
    if feature_encoder is None or semantic_encoder is None:
        f_default, e_default = default_encoders(dataset.resolution[0])
        feature_encoder = feature_encoder or f_default
        semantic_encoder = semantic_encoder or e_default
    lambda1, lambda2 = config.weights
    before = [module_checksum(m) for m in (base_model, feature_encoder, semantic_encoder)]

    patched = inject(base_model, rank=config.rank, alpha=config.alpha, gate_init=config.gate_init,
                     seed=config.seed, use_gating=config.use_gating)
    params = trainable_parameters(patched)
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    attack = config.attack_spec()
    extra = (_feature_penalty(feature_encoder, semantic_encoder, lambda1, lambda2)
             if config.inner_full_loss else None)
    order_gen = torch.Generator().manual_seed(config.seed)
    attack_gen = torch.Generator().manual_seed(config.seed + 1)
    trace = TrainTrace()

    iteration = 0
    for epoch in range(config.epochs):
        for x in dataset.batches(config.batch_size, shuffle=True, generator=order_gen):
            y = desired_output(base_model, x, watermark)
            if config.adversarial:
                x_adv = pgd(x, ConsistencyObjective(patched, y, extra), attack, attack_gen)
                out = patched(torch.cat([x, x_adv]))
                out_benign, out_adv = out[:len(x)], out[len(x):]
            else:
                out_benign, out_adv = patched(x), None
            terms = loss_terms(out_benign, out_adv, y, feature_encoder, semantic_encoder, lambda1, lambda2)
            total = terms.total.item()
            finite = math.isfinite(total) and total <= config.divergence_threshold
            record = TraceRecord(iteration, terms.pix.item(), terms.img.item(), terms.sem.item(), total,
                                 patched.gates(), finite)
            trace.append(record)
            if progress is not None:
                progress(record)
            if not finite:
                trace.diverged = True
                msg = f"loss diverged at iteration {iteration} (epoch {epoch}): {total}"
                if config.raise_on_divergence:
                    raise TrainingDivergenceError(msg, trace)
                logger.warning(msg)
                break
            optimizer.zero_grad(set_to_none=True)
            terms.total.backward()
            optimizer.step()
            iteration += 1
        if trace.diverged:
            break

    after = [module_checksum(m) for m in (base_model, feature_encoder, semantic_encoder)]
    if after != before:
        raise RuntimeError("frozen networks changed during fine-tuning")
    patch = extract_patch(patched, mode=config.mode, config=config.to_dict())
    if return_model:
        return patch, trace, patched
    return patch, trace


def expected_iterations(n_items: int, config: FinetuneConfig) -> int:
    return math.ceil(n_items / config.batch_size) * config.epochs


# -- JPEG comparison baseline -------------------------------------------------

def jpeg_baseline(image: torch.Tensor, quality: int = 75) -> torch.Tensor:
    """JPEG-encode and decode; accepts ``(3, H, W)`` or a batch.

    Chroma is subsampled 4:2:0 below quality 90 and kept at full resolution
    from 90 up, the usual encoder convention.
    """
    if not 1 <= quality <= 100:
        raise ConfigError("JPEG quality must lie in [1, 100]")
    if image.ndim == 4:
        return torch.stack([jpeg_baseline(im, quality) for im in image])
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="JPEG", quality=quality,
                                         subsampling=0 if quality >= 90 else 2)
    buf.seek(0)
    with Image.open(buf) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return from_uint8(arr).clamp(-1, 1)
