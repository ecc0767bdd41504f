"""Single-file container for patches and network weights.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"LORAPTCH"
    8       4     version (u32, currently 1)
    12      4     manifest length M (u32)
    16      M     manifest, UTF-8 JSON (sorted keys, compact separators)
    16+M    8     blob length N (u64)
    24+M    N     blob: concatenated float32 tensors, little-endian, C order
    24+M+N  32    SHA-256 of every preceding byte

The manifest lists every tensor as ``{"name", "shape", "offset", "nbytes"}``;
offsets tile the blob exactly. For patches the tensors are A then B for each
layer, in layer order, and the manifest additionally carries mode, rank,
alpha, base-model checksum, layer geometry, gate values and the creation
config. Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import BadMagicError, ChecksumError, PatchFormatError, VersionError
from .surgery import LayerDescriptor, LoraBlockParams, LoraPatch, PatchManifest

MAGIC = b"LORAPTCH"
VERSION = 1
DIGEST_SIZE = 32


def _encode_manifest(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def pack_container(manifest: dict, tensors: list[tuple[str, torch.Tensor]], version: int = VERSION) -> bytes:
    records, chunks, offset = [], [], 0
    for name, tensor in tensors:
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy().astype("<f4"))
        raw = arr.tobytes()
        records.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {**manifest, "tensors": records}
    man = _encode_manifest(manifest)
    blob = b"".join(chunks)
    body = MAGIC + struct.pack("<II", version, len(man)) + man + struct.pack("<Q", len(blob)) + blob
    return body + hashlib.sha256(body).digest()


def unpack_container(data: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    if len(data) < 8 or data[:8] != MAGIC:
        raise BadMagicError("not a LORAPTCH container (bad magic)")
    if len(data) < 16 + DIGEST_SIZE:
        raise ChecksumError("container truncated")
    version, = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise VersionError(f"unsupported container version {version} (expected {VERSION})")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("container checksum mismatch")
    man_len, = struct.unpack_from("<I", body, 12)
    man_end = 16 + man_len
    try:
        manifest = json.loads(body[16:man_end].decode("utf-8"))
        blob_len, = struct.unpack_from("<Q", body, man_end)
    except (ValueError, struct.error) as exc:
        raise PatchFormatError(f"malformed manifest: {exc}") from exc
    blob = body[man_end + 8:]
    if len(blob) != blob_len:
        raise PatchFormatError("blob length does not match header")
    tensors, cursor = {}, 0
    for rec in manifest.get("tensors", []):
        shape = tuple(rec["shape"])
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if rec["offset"] != cursor or rec["nbytes"] != expected:
            raise PatchFormatError(f"tensor {rec['name']!r} does not tile the blob")
        arr = np.frombuffer(blob, dtype="<f4", count=expected // 4, offset=cursor).reshape(shape)
        tensors[rec["name"]] = torch.from_numpy(arr.astype(np.float32))
        cursor += expected
    if cursor != blob_len:
        raise PatchFormatError("tensor records leave a gap at the end of the blob")
    return manifest, tensors


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, manifest: dict, tensors, version: int = VERSION) -> Path:
    path = Path(path)
    _atomic_write(path, pack_container(manifest, tensors, version))
    return path


def read_container(path) -> tuple[dict, dict[str, torch.Tensor]]:
    return unpack_container(Path(path).read_bytes())


# -- patches ------------------------------------------------------------------

def _patch_payload(patch: LoraPatch) -> tuple[dict, list]:
    patch.validate()
    m = patch.manifest
    manifest = {
        "content": "lora_patch",
        "mode": m.mode,
        "rank": m.rank,
        "alpha": m.alpha,
        "use_gating": m.use_gating,
        "base_model_checksum": m.base_model_checksum,
        "config_hash": m.config_hash,
        "creation_config": m.config,
        "layers": [d.to_dict() for d in patch.layers],
        "gates": [float(patch.blocks[d.path].gate) for d in patch.layers],
    }
    tensors = []
    for d in patch.layers:
        tensors.append((f"{d.path}.A", patch.blocks[d.path].A))
        tensors.append((f"{d.path}.B", patch.blocks[d.path].B))
    return manifest, tensors


def save_patch(patch: LoraPatch, path) -> Path:
    manifest, tensors = _patch_payload(patch)
    return write_container(path, manifest, tensors)


def patch_to_bytes(patch: LoraPatch) -> bytes:
    manifest, tensors = _patch_payload(patch)
    return pack_container(manifest, tensors)


def patch_from_bytes(data: bytes) -> LoraPatch:
    manifest, tensors = unpack_container(data)
    if manifest.get("content") != "lora_patch":
        raise PatchFormatError("container does not hold a LoRA patch")
    layers = [LayerDescriptor.from_dict(d) for d in manifest["layers"]]
    rank, alpha = manifest["rank"], manifest["alpha"]
    blocks = {}
    for d, gate in zip(layers, manifest["gates"]):
        blocks[d.path] = LoraBlockParams(A=tensors[f"{d.path}.A"], B=tensors[f"{d.path}.B"],
                                         gate=float(np.float32(gate)), rank=rank, alpha=alpha)
    patch = LoraPatch(layers=layers, blocks=blocks, manifest=PatchManifest(
        rank=rank, alpha=alpha, mode=manifest["mode"],
        base_model_checksum=manifest["base_model_checksum"], config_hash=manifest["config_hash"],
        use_gating=manifest.get("use_gating", True), config=manifest.get("creation_config", {})))
    patch.validate()
    return patch


def load_patch(path) -> LoraPatch:
    return patch_from_bytes(Path(path).read_bytes())


# -- network weights ----------------------------------------------------------

def save_module(module: nn.Module, path, meta: dict | None = None, content: str = "module") -> Path:
    state = module.state_dict()
    manifest = {"content": content, "meta": meta or {}, "dtypes": {k: str(v.dtype) for k, v in state.items()}}
    return write_container(path, manifest, list(state.items()))


def load_state(path) -> tuple[dict, dict[str, torch.Tensor]]:
    manifest, tensors = read_container(path)
    for name, dtype in manifest.get("dtypes", {}).items():
        if dtype != "torch.float32":
            tensors[name] = tensors[name].to(getattr(torch, dtype.split(".")[-1]))
    return manifest, tensors


def save_generator(gen, path, meta: dict | None = None) -> Path:
    from dataclasses import asdict

    return save_module(gen, path, {"generator_spec": asdict(gen.spec), **(meta or {})}, content="generator")


def load_generator(path):
    from .model_zoo import GeneratorSpec, build_toy_generator, freeze

    manifest, tensors = load_state(path)
    if manifest.get("content") != "generator":
        raise PatchFormatError("container does not hold a generator")
    gen = build_toy_generator(GeneratorSpec.from_dict(manifest["meta"]["generator_spec"]))
    gen.load_state_dict(tensors)
    gen.container_meta = manifest["meta"]
    return freeze(gen)
