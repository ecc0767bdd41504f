"""Visible warning watermark: overlay and presence scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .errors import WatermarkError

# 7-row block letters; 1 = ink.
_GLYPHS = {
    "A": ["01110", "10001", "10001", "11111", "10001", "10001", "10001"],
    "I": ["111", "010", "010", "010", "010", "010", "111"],
    "W": ["10001", "10001", "10001", "10101", "10101", "11011", "10001"],
    "R": ["11110", "10001", "10001", "11110", "10100", "10010", "10001"],
    "N": ["10001", "11001", "10101", "10011", "10001", "10001", "10001"],
    "G": ["01110", "10001", "10000", "10111", "10001", "10001", "01110"],
    " ": ["0", "0", "0", "0", "0", "0", "0"],
}


def render_text_mask(text: str = "AI", width: int = 16) -> np.ndarray:
    """Block-letter bitmap of ``text`` scaled (nearest) to ``width`` pixels."""
    cols = []
    for i, ch in enumerate(text.upper()):
        if ch not in _GLYPHS:
            raise WatermarkError(f"no glyph for character {ch!r}")
        if i:
            cols.append(np.zeros((7, 1), dtype=bool))
        cols.append(np.array([[c == "1" for c in row] for row in _GLYPHS[ch]], dtype=bool))
    bitmap = np.concatenate(cols, axis=1)
    height = max(1, round(width * bitmap.shape[0] / bitmap.shape[1]))
    rows = (np.arange(height) * bitmap.shape[0] // height)
    colsi = (np.arange(width) * bitmap.shape[1] // width)
    return bitmap[rows][:, colsi]


def load_glyph_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("1"), dtype=bool)


@dataclass
class WatermarkSpec:
    glyph: np.ndarray
    position: tuple[int, int]
    opacity: float = 0.8
    foreground_value: float = 1.0
    additive: bool = False

    def __post_init__(self):
        self.glyph = np.asarray(self.glyph, dtype=bool)
        if self.glyph.ndim != 2 or not self.glyph.any():
            raise WatermarkError("glyph must be a nonempty 2-D mask")
        if not 0 < self.opacity <= 1:
            raise WatermarkError("opacity must lie in (0, 1]")
        if not -1 <= self.foreground_value <= 1:
            raise WatermarkError("foreground_value must lie in [-1, 1]")

    def full_mask(self, height: int, width: int) -> torch.Tensor:
        r, c = self.position
        gh, gw = self.glyph.shape
        if r < 0 or c < 0 or r + gh > height or c + gw > width:
            raise WatermarkError(
                f"glyph {gh}x{gw} at {self.position} does not fit a {height}x{width} image")
        mask = np.zeros((height, width), dtype=bool)
        mask[r:r + gh, c:c + gw] = self.glyph
        return torch.from_numpy(mask)

    def to_dict(self) -> dict:
        return {"glyph": ["".join("1" if v else "0" for v in row) for row in self.glyph],
                "position": list(self.position), "opacity": self.opacity,
                "foreground_value": self.foreground_value, "additive": self.additive}

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkSpec":
        glyph = np.array([[c == "1" for c in row] for row in d["glyph"]], dtype=bool)
        return cls(glyph=glyph, position=tuple(d["position"]), opacity=d["opacity"],
                   foreground_value=d["foreground_value"], additive=d.get("additive", False))


def default_watermark(image_size: int = 64, text: str = "AI", opacity: float = 0.8,
                      foreground_value: float = 1.0, width_fraction: float = 0.25,
                      margin_fraction: float = 0.06) -> WatermarkSpec:
    """Block-letter "AI" at a quarter of the image width, anchored bottom-right."""
    glyph = render_text_mask(text, max(3, round(image_size * width_fraction)))
    margin = max(1, round(image_size * margin_fraction))
    position = (image_size - margin - glyph.shape[0], image_size - margin - glyph.shape[1])
    return WatermarkSpec(glyph=glyph, position=position, opacity=opacity,
                         foreground_value=foreground_value)


def apply_watermark(image: torch.Tensor, spec: WatermarkSpec) -> torch.Tensor:
    """Blend the glyph into ``image`` ((3, H, W) or (N, 3, H, W)); pixels off the glyph are untouched."""
    mask = spec.full_mask(*image.shape[-2:])
    fg = torch.tensor(spec.foreground_value, dtype=image.dtype)
    if spec.additive:
        marked = image + spec.opacity * fg
    else:
        marked = (1 - spec.opacity) * image + spec.opacity * fg
    return torch.where(mask, marked.clamp(-1, 1), image)


def _background(spec: WatermarkSpec, height: int, width: int) -> torch.Tensor:
    """Off-glyph pixels of the glyph's bounding box grown by one pixel."""
    r, c = spec.position
    gh, gw = spec.glyph.shape
    box = torch.zeros(height, width, dtype=torch.bool)
    box[max(0, r - 1):r + gh + 1, max(0, c - 1):c + gw + 1] = True
    return box & ~spec.full_mask(height, width)


def watermark_score(image: torch.Tensor, spec: WatermarkSpec, return_flag: bool = False):
    """Presence of the watermark in a single ``(3, H, W)`` image, in [-1, 1].

    Per channel, the glyph pixels are referenced to the mean of the
    surrounding off-glyph pixels and correlated (normalised, uncentred) with
    the ideal watermark contrast, which is constant over the glyph. The
    channel scores are averaged. A perfectly stamped glyph scores 1, noise
    scores about 0, and adding a constant to the image changes nothing.
    A degenerate (zero-energy) region yields 0 and sets the flag.
    """
    if image.ndim != 3:
        raise WatermarkError("watermark_score expects a single (3, H, W) image")
    h, w = image.shape[-2:]
    mask = spec.full_mask(h, w)
    bg = _background(spec, h, w)
    img = image.detach().double()
    scores, degenerate = [], False
    for ch in img:
        ref = ch[bg].mean() if bg.any() else ch.mean()
        contrast = ch[mask] - ref
        ideal = spec.foreground_value - ref
        energy = contrast.pow(2).mean().sqrt()
        if energy < 1e-12 or abs(ideal) < 1e-12:
            degenerate = True
            scores.append(0.0)
            continue
        scores.append((torch.sign(ideal) * contrast.mean() / energy).item())
    score = float(np.mean(scores))
    if degenerate and all(s == 0.0 for s in scores):
        score = 0.0
    return (score, degenerate) if return_flag else score
