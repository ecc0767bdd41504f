"""L-infinity PGD with swappable objectives.

An objective is any callable mapping a batch of candidate inputs to one
nonnegative score per sample; PGD ascends it by signed gradient steps and
projects back onto the epsilon ball and the valid pixel range.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .dataio import Dataset, save_folder
from .errors import AttackError, ConfigError, DatasetError
from .surgery import module_checksum

logger = logging.getLogger(__name__)

OBJECTIVES = ("disrupt_self", "break_consistency")
RETURN_POLICIES = ("last_iterate", "best_iterate")


@dataclass
class AttackSpec:
    epsilon: float = 0.05
    steps: int = 10
    step_size: float = 0.01
    random_start: bool = True
    objective: str = "disrupt_self"
    return_policy: str = "best_iterate"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.steps > 0 and not self.step_size > 0:
            raise ConfigError("step_size must be > 0 when steps > 0")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.return_policy not in RETURN_POLICIES:
            raise ConfigError(f"unknown return_policy {self.return_policy!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(**d)


def per_sample_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).flatten(1).mean(1)


class DisruptionObjective:
    """MSE between the model's output on the candidate and on the clean input."""

    def __init__(self, model: nn.Module, x: torch.Tensor):
        self.model = model
        with torch.no_grad():
            self.reference = model(x).detach()

    def __call__(self, x_adv: torch.Tensor) -> torch.Tensor:
        return per_sample_mse(self.model(x_adv), self.reference)


class ConsistencyObjective:
    """Distance between the (patched) model's output on the candidate and ``y``.

    By default only the pixel term; pass ``loss_terms`` (a callable returning
    per-sample extra penalties for an output batch) to use the full loss.
    """

    def __init__(self, model: nn.Module, y: torch.Tensor, loss_terms=None):
        self.model = model
        self.y = y.detach()
        self.loss_terms = loss_terms

    def __call__(self, x_adv: torch.Tensor) -> torch.Tensor:
        out = self.model(x_adv)
        value = per_sample_mse(out, self.y)
        if self.loss_terms is not None:
            value = value + self.loss_terms(out, self.y)
        return value


def disruption_objective(model: nn.Module, x: torch.Tensor, x_adv: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return ((model(x) - model(x_adv)) ** 2).mean()


def consistency_objective(patched_model: nn.Module, x_adv: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return ((patched_model(x_adv) - y) ** 2).mean()


def _project(x_adv, x, eps):
    return torch.max(torch.min(x_adv, x + eps), x - eps).clamp(-1.0, 1.0)


def pgd(x: torch.Tensor, objective, spec: AttackSpec, generator: torch.Generator | None = None) -> torch.Tensor:
    """Maximise ``objective`` over the L-inf ball of radius ``spec.epsilon`` around ``x``.

    ``objective(batch)`` must return one score per sample. With the
    best-iterate policy every sample gets its own highest-scoring iterate,
    starting point included.
    """
    spec.validate()
    x = x.detach()
    eps = float(spec.epsilon)
    if eps == 0.0 or (spec.steps == 0 and not spec.random_start):
        return x.clone()
    if spec.random_start:
        if generator is None:
            generator = torch.Generator().manual_seed(spec.seed)
        noise = (torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1) * eps
        x_adv = _project(x + noise, x, eps)
    else:
        x_adv = x.clone()

    best = x_adv.clone()
    best_val = None
    for step in range(spec.steps + 1):
        x_adv.requires_grad_(True)
        with torch.enable_grad():
            value = objective(x_adv)
            grad = None
            if step < spec.steps:
                grad, = torch.autograd.grad(value.sum(), x_adv)
        value = value.detach()
        if not torch.all(torch.isfinite(value)):
            raise AttackError(f"non-finite objective at PGD step {step}")
        if best_val is None:
            best_val = value.clone()
        else:
            improved = value > best_val
            best_val = torch.where(improved, value, best_val)
            best[improved] = x_adv.detach()[improved]
        if grad is None:
            break
        if not torch.all(torch.isfinite(grad)):
            raise AttackError(f"non-finite input gradient at PGD step {step}")
        x_adv = _project(x_adv.detach() + spec.step_size * grad.sign(), x, eps)

    if spec.return_policy == "best_iterate":
        return best
    return x_adv.detach()


def protect(model: nn.Module, dataset: Dataset, spec: AttackSpec, batch_size: int = 16) -> Dataset:
    """Proactive-defence perturbation of every image against ``model``.

    With the original generator as target this is the standard scenario; with
    a patched generator it is the leakage scenario.
    """
    if len(dataset) == 0:
        raise DatasetError("cannot protect an empty dataset")
    if spec.objective != "disrupt_self":
        raise ConfigError("protect requires the disrupt_self objective")
    model.eval()
    generator = torch.Generator().manual_seed(spec.seed)
    out = []
    for batch in dataset.batches(batch_size):
        out.append(pgd(batch, DisruptionObjective(model, batch), spec, generator))
    return dataset.with_images(torch.cat(out), protected="true", epsilon=str(spec.epsilon))


def save_protected(ds: Dataset, directory: str | os.PathLike, spec: AttackSpec, target: nn.Module,
                   extra: dict | None = None):
    """PNG files plus the exact float tensor; manifest records spec and target checksum."""
    meta = {"attack": asdict(spec), "target_model_checksum": module_checksum(target), **(extra or {})}
    return save_folder(ds, directory, extra={"protection": meta})


def attack_manifest(spec: AttackSpec, target: nn.Module) -> str:
    return json.dumps({"attack": asdict(spec), "target_model_checksum": module_checksum(target)},
                      sort_keys=True)
