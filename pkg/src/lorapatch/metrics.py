"""Evaluation metrics (L2, SSIM, DSR, feature-space FID) and table reports.

All distances use the mean-square convention: ``l2_distance`` is the mean of
squared differences over every element, in [-1, 1] pixel units.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, ShapeError

SCENARIOS = ("standard", "leakage", "benign_impact", "defensive")


def _as_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images.unsqueeze(0) if images.ndim == 3 else images
    return torch.stack(list(images))


def l2_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a.double() - b.double()) ** 2).mean().item()


def per_image_l2(a, b) -> torch.Tensor:
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a.double() - b.double()) ** 2).flatten(1).mean(1)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_per_image(a, b, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Mean SSIM per image pair; inputs in [-1, 1] are rescaled to [0, 1].

    Gaussian 11x11 window with sigma 1.5, K1 = 0.01, K2 = 0.03, valid-region
    statistics (no padding), averaged over windows and channels.
    """
    a, b = _as_batch(a).double(), _as_batch(b).double()
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < window:
        raise ShapeError(f"image {tuple(a.shape[-2:])} smaller than SSIM window {window}")
    a, b = (a + 1) / 2, (b + 1) / 2
    c = a.shape[1]
    kernel = _gaussian_window(window, sigma).expand(c, 1, window, window)

    def filt(t):
        return F.conv2d(t, kernel, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return s.flatten(1).mean(1)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    return ssim_per_image(a, b).mean().item()


@dataclass
class DsrConfig:
    tau: float = 0.05

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")


def dsr(outputs, desired, cfg: DsrConfig | float = DsrConfig()) -> float:
    """Fraction of pairs whose mean-square distance exceeds ``tau``."""
    tau = cfg.tau if isinstance(cfg, DsrConfig) else float(cfg)
    if len(outputs) != len(desired):
        raise ShapeError("outputs and desired differ in length")
    if len(outputs) == 0:
        raise ShapeError("dsr needs at least one pair")
    d = per_image_l2(outputs, desired)
    return (d > tau).double().mean().item()


def dsr_from_distances(distances: Sequence[float], tau: float) -> float:
    if len(distances) == 0:
        raise ShapeError("dsr needs at least one distance")
    return sum(1 for d in distances if d > tau) / len(distances)


# -- FID ----------------------------------------------------------------------

@dataclass
class FidResult:
    value: float
    regularized: bool = False
    undersampled: bool = False

    def __float__(self):
        return self.value


@torch.no_grad()
def encode(images, encoder, batch_size: int = 64) -> np.ndarray:
    images = _as_batch(images)
    feats = [encoder(images[i:i + batch_size]).double() for i in range(0, len(images), batch_size)]
    return torch.cat(feats).numpy()


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(feat_a: np.ndarray, feat_b: np.ndarray, eps: float = 1e-6) -> FidResult:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` on feature rows."""
    d = feat_a.shape[1]
    undersampled = min(len(feat_a), len(feat_b)) < 2 * d
    mu_a, mu_b = feat_a.mean(0), feat_b.mean(0)
    cov_a = np.atleast_2d(np.cov(feat_a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(feat_b, rowvar=False))
    regularized = False
    for cov in (cov_a, cov_b):
        if np.linalg.eigvalsh(cov).min() < eps:
            regularized = True
    if regularized:
        cov_a = cov_a + eps * np.eye(d)
        cov_b = cov_b + eps * np.eye(d)
    # Tr((S_a S_b)^(1/2)) = Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)), symmetric and stable.
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    tr_cross = np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0, None)).sum()
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_cross)
    return FidResult(max(value, 0.0), regularized, undersampled)


def fid(set_a, set_b, encoder, eps: float = 1e-6) -> FidResult:
    """Feature-space Frechet distance ("toy-FID" with the stand-in encoder)."""
    return frechet_distance(encode(set_a, encoder), encode(set_b, encoder), eps)


# Optional metrics needing external pretrained artefacts (BRISQUE, CLIP score).
EXTERNAL_METRICS: dict[str, Callable] = {}


def register_external_metric(name: str, fn: Callable) -> None:
    EXTERNAL_METRICS[name] = fn


def external_metric(name: str, images) -> float:
    if name not in EXTERNAL_METRICS:
        raise NotImplementedError(f"metric {name!r} needs an external implementation; "
                                  "register one with register_external_metric")
    return float(EXTERNAL_METRICS[name](images))


# -- reports ------------------------------------------------------------------

@dataclass
class MetricRow:
    defense: str
    bypass: str
    model: str
    scenario: str
    l2: float
    ssim: float
    dsr: float
    fid: float | None = None
    n_images: int = 0
    tau: float = 0.05

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if not 0 <= self.dsr <= 1:
            raise ConfigError("dsr must lie in [0, 1]")
        if not -1 - 1e-9 <= self.ssim <= 1 + 1e-9:
            raise ConfigError("ssim must lie in [-1, 1]")
        if self.l2 < 0 or (self.fid is not None and self.fid < 0):
            raise ConfigError("l2 and fid must be nonnegative")


def evaluate_pair(outputs, desired, defense: str, bypass: str, model: str, scenario: str,
                  tau: float = 0.05, encoder=None) -> MetricRow:
    outputs, desired = _as_batch(outputs), _as_batch(desired)
    d = per_image_l2(outputs, desired)
    fid_value = fid(outputs, desired, encoder).value if encoder is not None else None
    return MetricRow(defense=defense, bypass=bypass, model=model, scenario=scenario,
                     l2=d.mean().item(), ssim=ssim(outputs, desired),
                     dsr=dsr_from_distances(d.tolist(), tau), fid=fid_value,
                     n_images=len(outputs), tau=tau)


_BETTER = {"l2": min, "ssim": max, "dsr": min, "fid": min}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


@dataclass
class Report:
    rows: list[MetricRow]
    csv: str
    markdown: str

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        csv_path, md_path = stem.with_suffix(".csv"), stem.with_suffix(".md")
        csv_path.write_text(self.csv)
        md_path.write_text(self.markdown)
        return csv_path, md_path


def build_report(rows: Sequence[MetricRow], title: str = "") -> Report:
    """CSV plus a Markdown table grouped by (defense, model); best values in bold."""
    if not rows:
        raise ConfigError("report needs at least one row")
    names = [f.name for f in fields(MetricRow)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)

    groups: dict[tuple[str, str], list[MetricRow]] = {}
    for row in rows:
        groups.setdefault((row.defense, row.model), []).append(row)

    lines = [f"## {title}", ""] if title else []
    header = ["defense", "model", "bypass", "scenario", "L2", "SSIM", "DSR", "toy-FID", "n"]
    lines += ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for (defense, model), members in groups.items():
        best = {}
        for metric, pick in _BETTER.items():
            vals = [getattr(r, metric) for r in members if getattr(r, metric) is not None]
            if len(vals) > 1:
                best[metric] = pick(vals)
        for row in members:
            writer.writerow([_fmt(getattr(row, n)) for n in names])
            cells = [defense, model, row.bypass, row.scenario]
            for metric in ("l2", "ssim", "dsr", "fid"):
                v = getattr(row, metric)
                text = _fmt(v)
                if metric in best and v == best[metric]:
                    text = f"**{text}**"
                cells.append(text)
            cells.append(str(row.n_images))
            lines.append("| " + " | ".join(cells) + " |")
    return Report(rows=list(rows), csv=buf.getvalue(), markdown="\n".join(lines) + "\n")


def best_rows(report: Report, metric: str) -> list[MetricRow]:
    """Rows holding the best value of ``metric`` within their (defense, model) group."""
    pick = _BETTER[metric]
    groups: dict[tuple[str, str], list[MetricRow]] = {}
    for row in report.rows:
        groups.setdefault((row.defense, row.model), []).append(row)
    out = []
    for members in groups.values():
        target = pick(getattr(r, metric) for r in members)
        out += [r for r in members if getattr(r, metric) == target]
    return out


def save_contact_sheet(columns: Sequence[torch.Tensor], path: str | Path, max_rows: int = 8,
                       scale: int = 2) -> Path:
    """Grid PNG: one row per image, one column per stage (e.g. input | protected | outputs)."""
    from .dataio import to_uint8

    n = min(max_rows, min(len(c) for c in columns))
    rows = [np.concatenate([to_uint8(col[i]) for col in columns], axis=1) for i in range(n)]
    grid = np.concatenate(rows, axis=0)
    img = Image.fromarray(grid)
    if scale > 1:
        img = img.resize((grid.shape[1] * scale, grid.shape[0] * scale), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    return path


def metric_rows_to_dicts(rows: Sequence[MetricRow]) -> list[dict]:
    return [asdict(r) for r in rows]


def isfinite_row(row: MetricRow) -> bool:
    return all(math.isfinite(v) for v in (row.l2, row.ssim, row.dsr))
