import json
import struct

import pytest
import torch

from lorapatch.errors import BadMagicError, ChecksumError, PatchFormatError, VersionError
from lorapatch.patchio import (
    DIGEST_SIZE,
    load_generator,
    load_patch,
    pack_container,
    patch_from_bytes,
    patch_to_bytes,
    save_generator,
    save_patch,
    unpack_container,
)
from lorapatch.surgery import adapter_parameter_count, extract_patch, inject


@pytest.fixture
def trained_patch(small_gen):
    patched = inject(small_gen, rank=4, seed=1)
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for layer in patched.patched_layers().values():
            layer.lora_B.weight.copy_(torch.randn(layer.lora_B.weight.shape, generator=g))
            layer.gate.fill_(float(torch.randn(1, generator=g)))
    return extract_patch(patched, config={"note": "unit"})


def _assert_patch_equal(a, b):
    assert [d.to_dict() for d in a.layers] == [d.to_dict() for d in b.layers]
    for d in a.layers:
        x, y = a.blocks[d.path], b.blocks[d.path]
        assert torch.equal(x.A, y.A) and torch.equal(x.B, y.B)
        assert x.gate == y.gate and x.rank == y.rank and x.alpha == y.alpha
    assert a.manifest == b.manifest


def test_roundtrip_bit_exact(tmp_path, trained_patch):
    path = save_patch(trained_patch, tmp_path / "p.lora")
    _assert_patch_equal(trained_patch, load_patch(path))


def test_save_is_byte_deterministic(tmp_path, trained_patch):
    a = save_patch(trained_patch, tmp_path / "a.lora").read_bytes()
    b = save_patch(trained_patch, tmp_path / "b.lora").read_bytes()
    assert a == b


def test_file_size_from_parameter_count(trained_patch):
    data = patch_to_bytes(trained_patch)
    man_len, = struct.unpack_from("<I", data, 12)
    n_layers = len(trained_patch.layers)
    floats = trained_patch.num_parameters() - n_layers  # gates live in the manifest
    assert len(data) == 8 + 4 + 4 + man_len + 8 + 4 * floats + DIGEST_SIZE


def test_offsets_tile_blob(trained_patch):
    manifest, _ = unpack_container(patch_to_bytes(trained_patch))
    cursor = 0
    for rec in manifest["tensors"]:
        assert rec["offset"] == cursor
        cursor += rec["nbytes"]
    names = [r["name"] for r in manifest["tensors"]]
    assert names[0].endswith(".A") and names[1].endswith(".B")


def test_truncation_is_checksum_error(trained_patch):
    data = patch_to_bytes(trained_patch)
    with pytest.raises(ChecksumError):
        patch_from_bytes(data[:-1])


def test_bad_magic_and_version(trained_patch):
    data = bytearray(patch_to_bytes(trained_patch))
    bad = bytes(b"NOTAPTCH" + data[8:])
    with pytest.raises(BadMagicError):
        patch_from_bytes(bad)
    manifest, tensors = unpack_container(bytes(data))
    bumped = pack_container({k: v for k, v in manifest.items() if k != "tensors"},
                            list(tensors.items()), version=2)
    with pytest.raises(VersionError):
        patch_from_bytes(bumped)


def test_error_codes_distinct():
    codes = {BadMagicError.code, VersionError.code, ChecksumError.code}
    assert len(codes) == 3


def test_every_blob_byte_corruption_detected(trained_patch):
    data = patch_to_bytes(trained_patch)
    man_len, = struct.unpack_from("<I", data, 12)
    start = 16 + man_len + 8
    for pos in range(start, len(data) - DIGEST_SIZE, 97):
        corrupted = bytearray(data)
        corrupted[pos] ^= 0x01
        with pytest.raises(ChecksumError):
            patch_from_bytes(bytes(corrupted))


def test_non_tiling_manifest_rejected():
    data = pack_container({"content": "x"}, [("a", torch.zeros(4))])
    manifest, _ = unpack_container(data)
    manifest["tensors"][0]["offset"] = 4
    man = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    import hashlib

    body = b"LORAPTCH" + struct.pack("<II", 1, len(man)) + man + struct.pack("<Q", 16) + bytes(16)
    with pytest.raises(PatchFormatError):
        unpack_container(body + hashlib.sha256(body).digest())


def test_unwritable_path(trained_patch, tmp_path):
    with pytest.raises(OSError):
        save_patch(trained_patch, tmp_path / "missing_dir" / "p.lora")


def test_generator_roundtrip(tmp_path, small_gen):
    path = save_generator(small_gen, tmp_path / "g.lora")
    back = load_generator(path)
    for (k, v), (k2, v2) in zip(small_gen.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    assert all(not p.requires_grad for p in back.parameters())


def test_adapter_count_consistent(small_gen, trained_patch):
    from lorapatch.surgery import enumerate_patchable_layers

    assert trained_patch.num_parameters() == adapter_parameter_count(enumerate_patchable_layers(small_gen), rank=4)
