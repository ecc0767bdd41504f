"""Image datasets: folder ingestion, synthetic faces, splits and persistence.

Images are float32 tensors of shape ``(3, H, W)`` with values in ``[-1, 1]``.
A :class:`Dataset` keeps them stacked in one ``(N, 3, H, W)`` tensor, ordered
by id.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DatasetError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
EXACT_TENSOR_FILE = "images.npy"
MANIFEST_FILE = "manifest.json"


@dataclass
class Dataset:
    ids: list[str]
    images: torch.Tensor
    sources: list[str] = field(default_factory=list)
    tags: dict[str, str] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DatasetError(f"expected (N, 3, H, W) images, got {tuple(self.images.shape)}")
        if len(self.ids) != self.images.shape[0]:
            raise DatasetError("ids and images differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DatasetError("dataset ids must be unique")
        if not self.sources:
            self.sources = [""] * len(self.ids)
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        if order != list(range(len(self.ids))):
            self.ids = [self.ids[i] for i in order]
            self.sources = [self.sources[i] for i in order]
            self.images = self.images[order]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.images.shape[-2:])

    def subset(self, indices: Sequence[int], tag: str | None = None) -> "Dataset":
        indices = sorted(indices)
        tags = dict(self.tags)
        if tag is not None:
            tags["split"] = tag
        return Dataset(
            ids=[self.ids[i] for i in indices],
            images=self.images[list(indices)].clone(),
            sources=[self.sources[i] for i in indices],
            tags=tags,
        )

    def head(self, n: int) -> "Dataset":
        return self.subset(range(min(n, len(self))))

    def with_images(self, images: torch.Tensor, **tags) -> "Dataset":
        """Same ids, new pixel data (e.g. protected or generated versions)."""
        return Dataset(ids=list(self.ids), images=images, sources=list(self.sources),
                       tags={**self.tags, **tags})

    def batches(self, batch_size: int, shuffle: bool = False,
                generator: torch.Generator | None = None) -> Iterator[torch.Tensor]:
        if shuffle:
            order = torch.randperm(len(self), generator=generator)
        else:
            order = torch.arange(len(self))
        for start in range(0, len(self), batch_size):
            yield self.images[order[start:start + batch_size]]


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` in [-1, 1] -> ``(H, W, 3)`` uint8 via round((x + 1) * 127.5)."""
    arr = image.detach().cpu().double().clamp(-1, 1).numpy()
    return np.round((arr + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """``(H, W, 3)`` uint8 -> ``(3, H, W)`` float32 via x / 127.5 - 1."""
    x = arr.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))


def _resize(img: Image.Image, size: int) -> Image.Image:
    if img.size == (size, size):
        return img
    # PIL's bilinear filter widens its support when downscaling, i.e. antialiases.
    return img.resize((size, size), resample=Image.BILINEAR)


def load_folder(directory: str | os.PathLike, size: int = 64, limit: int | None = None) -> Dataset:
    """Load every image in ``directory`` sorted by filename.

    Undecodable files are skipped with a warning and listed in ``skipped``.
    If the folder carries an exact float tensor written by :func:`save_folder`
    it is preferred over the 8-bit PNGs (adversarial perturbations are not
    grid-aligned).
    """
    directory = Path(directory)
    if size <= 0:
        raise DatasetError("size must be positive")
    if not directory.is_dir():
        raise DatasetError(f"not a readable directory: {directory}")

    exact = _load_exact(directory, size, limit)
    if exact is not None:
        return exact

    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    ids, images, sources, skipped = [], [], [], []
    for path in files:
        if limit is not None and len(ids) >= limit:
            break
        try:
            with Image.open(path) as img:
                img = _resize(img.convert("RGB"), size)
                arr = np.asarray(img, dtype=np.uint8)
        except Exception as exc:  # PIL raises a zoo of types for corrupt files
            logger.warning("skipping undecodable image %s: %s", path, exc)
            skipped.append(str(path))
            continue
        ids.append(path.stem)
        images.append(from_uint8(arr))
        sources.append(str(path))
    if not images:
        raise DatasetError(f"no decodable images in {directory}")
    return Dataset(ids=ids, images=torch.stack(images), sources=sources,
                   tags={"origin": str(directory)}, skipped=skipped)


def _load_exact(directory: Path, size: int, limit: int | None) -> Dataset | None:
    tensor_path = directory / EXACT_TENSOR_FILE
    manifest_path = directory / MANIFEST_FILE
    if not (tensor_path.exists() and manifest_path.exists()):
        return None
    manifest = json.loads(manifest_path.read_text())
    images = torch.from_numpy(np.load(tensor_path))
    if images.shape[-1] != size or images.shape[-2] != size:
        logger.info("exact tensor resolution differs from requested size; using PNGs")
        return None
    ids = [item["id"] for item in manifest["items"]]
    sources = [item.get("source", "") for item in manifest["items"]]
    if limit is not None:
        ids, sources, images = ids[:limit], sources[:limit], images[:limit]
    return Dataset(ids=ids, images=images.float(), sources=sources,
                   tags=dict(manifest.get("tags", {})))


def save_folder(ds: Dataset, directory: str | os.PathLike, extra: dict | None = None) -> Path:
    """Write PNGs, the exact float tensor and a JSON manifest (id, source, checksum)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    items = []
    for id_, src, image in zip(ds.ids, ds.sources, ds.images):
        path = directory / f"{id_}.png"
        Image.fromarray(to_uint8(image)).save(path, format="PNG")
        items.append({
            "id": id_,
            "file": path.name,
            "source": src,
            "sha256": hashlib.sha256(image.numpy().astype("<f4").tobytes()).hexdigest(),
        })
    np.save(directory / EXACT_TENSOR_FILE, ds.images.numpy().astype(np.float32))
    manifest = {"items": items, "tags": ds.tags, "resolution": list(ds.resolution),
                "skipped": ds.skipped, **(extra or {})}
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def dataset_checksum(ds: Dataset) -> str:
    h = hashlib.sha256()
    for id_ in ds.ids:
        h.update(id_.encode())
    h.update(ds.images.numpy().astype("<f4").tobytes())
    return h.hexdigest()


def split(ds: Dataset, fractions: Sequence[float] = (0.8, 0.2), seed: int = 0) -> tuple[Dataset, ...]:
    """Deterministic disjoint covering split; part sizes follow ``fractions``."""
    if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise DatasetError(f"fractions must be nonnegative and sum to 1, got {fractions}")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.round(np.cumsum([0.0, *fractions]) * n).astype(int)
    bounds[-1] = n
    names = ["train", "heldout"] + [f"part{i}" for i in range(2, len(fractions))]
    return tuple(
        ds.subset(perm[lo:hi].tolist(), tag=names[k])
        for k, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:]))
    )


# -- synthetic faces ----------------------------------------------------------

_SKIN = np.array([[0.96, 0.80, 0.69], [0.87, 0.67, 0.52], [0.72, 0.52, 0.38],
                  [0.55, 0.38, 0.26], [0.98, 0.87, 0.77]])
_HAIR = np.array([[0.10, 0.07, 0.05], [0.35, 0.22, 0.12], [0.80, 0.65, 0.35],
                  [0.55, 0.20, 0.10], [0.45, 0.45, 0.45]])


def _soft(signed: np.ndarray, sharp: float) -> np.ndarray:
    """Soft inside-indicator from a signed distance-like field (negative inside)."""
    return 1.0 / (1.0 + np.exp(np.clip(signed * sharp, -50, 50)))


def _ellipse(xx, yy, cx, cy, rx, ry):
    return np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2) - 1.0


def _paint(canvas, mask, color):
    canvas *= 1.0 - mask[..., None]
    canvas += mask[..., None] * np.asarray(color)[None, None, :]


def _render_face(rng: np.random.Generator, size: int) -> np.ndarray:
    lin = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    sharp = size / 3.0

    c0, c1 = rng.uniform(0.15, 0.65, size=(2, 3))
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * xx + np.sin(theta) * yy + 1.5) / 3.0
    canvas = c0[None, None, :] * (1 - t[..., None]) + c1[None, None, :] * t[..., None]

    cx, cy = rng.uniform(-0.1, 0.1, size=2)
    rx, ry = rng.uniform(0.42, 0.55), rng.uniform(0.55, 0.7)
    skin = np.clip(_SKIN[rng.integers(len(_SKIN))] + rng.normal(0, 0.03, 3), 0, 1)
    hair = np.clip(_HAIR[rng.integers(len(_HAIR))] + rng.normal(0, 0.03, 3), 0, 1)
    shirt = rng.uniform(0.05, 0.6, size=3)

    _paint(canvas, _soft(_ellipse(xx, yy, cx, 1.25, 0.8, 0.45), sharp), shirt)
    _paint(canvas, _soft(_ellipse(xx, yy, cx, cy + 0.55 * ry, 0.35 * rx, 0.6 * ry), sharp), skin * 0.92)
    hair_mask = _soft(_ellipse(xx, yy, cx, cy - 0.08, rx * 1.12, ry * 1.02), sharp)
    hair_mask *= _soft(yy - (cy + rng.uniform(0.0, 0.25)), sharp)
    _paint(canvas, hair_mask, hair)
    _paint(canvas, _soft(_ellipse(xx, yy, cx, cy + 0.08, rx, ry * 0.9), sharp), skin)
    fringe = _soft(_ellipse(xx, yy, cx, cy - 0.55 * ry, rx * 0.95, 0.35 * ry), sharp)
    fringe *= _soft(yy - (cy - rng.uniform(0.3, 0.5) * ry), sharp)
    _paint(canvas, fringe, hair)

    eye_dx, eye_y = rng.uniform(0.3, 0.42) * rx, cy - rng.uniform(0.0, 0.15) * ry
    eye_r = rng.uniform(0.07, 0.1)
    iris = rng.uniform(0.05, 0.5, size=3)
    brow_lift = rng.uniform(0.12, 0.22)
    for side in (-1, 1):
        ex = cx + side * eye_dx
        _paint(canvas, _soft(_ellipse(xx, yy, ex, eye_y, eye_r * 1.4, eye_r), sharp), [0.95, 0.95, 0.95])
        _paint(canvas, _soft(_ellipse(xx, yy, ex, eye_y, eye_r * 0.6, eye_r * 0.8), sharp), iris)
        _paint(canvas, _soft(_ellipse(xx, yy, ex, eye_y - brow_lift, eye_r * 1.6, 0.03), sharp), hair * 0.8)

    _paint(canvas, _soft(_ellipse(xx, yy, cx, cy + 0.15 * ry, 0.06, 0.12), sharp), skin * 0.8)
    mouth_y = cy + rng.uniform(0.45, 0.55) * ry
    mouth_w, mouth_h = rng.uniform(0.18, 0.3), rng.uniform(0.03, 0.08)
    lips = np.clip([0.75, 0.25, 0.3] + rng.normal(0, 0.05, 3), 0, 1)
    _paint(canvas, _soft(_ellipse(xx, yy, cx, mouth_y, mouth_w, mouth_h), sharp), lips)
    return np.clip(canvas * 2.0 - 1.0, -1.0, 1.0)


def synth_faces(n: int, size: int = 64, seed: int = 0) -> Dataset:
    """Procedural face-like images (head, hair, eyes, brows, nose, mouth, shirt)."""
    if n < 1:
        raise DatasetError("n must be >= 1")
    rng = np.random.default_rng(seed)
    images = np.stack([_render_face(rng, size) for _ in range(n)]).astype(np.float32)
    images = images.transpose(0, 3, 1, 2)
    ids = [f"synth_{i:05d}" for i in range(n)]
    return Dataset(ids=ids, images=torch.from_numpy(np.ascontiguousarray(images)),
                   sources=["synthetic"] * n, tags={"origin": f"synth_faces(seed={seed})"})
