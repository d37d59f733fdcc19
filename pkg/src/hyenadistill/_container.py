"""Binary container framing shared by checkpoints, activation datasets, and
tokenized corpora: magic bytes, u32 version, u64 manifest length, UTF-8 JSON
manifest, then a raw little-endian payload laid out as the manifest says."""

from __future__ import annotations

import json
import struct

MAGIC_MODEL = b"HYSC"
MAGIC_ACTIVATIONS = b"HYAD"
MAGIC_CORPUS = b"HYTK"
VERSION = 1

_DTYPE_CODES = {"f32": "<f4", "f64": "<f8", "i32": "<i4", "i64": "<i8"}


class ContainerError(Exception):
    """Bad magic, corrupt manifest, or truncated payload."""


def dtype_code(name: str) -> str:
    try:
        return _DTYPE_CODES[name]
    except KeyError:
        raise ContainerError(f"unknown dtype tag {name!r}") from None


def write_header(f, magic: bytes, manifest: dict) -> None:
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    f.write(magic)
    f.write(struct.pack("<I", VERSION))
    f.write(struct.pack("<Q", len(blob)))
    f.write(blob)


def read_header(f, expected_magic: bytes) -> dict:
    magic = f.read(4)
    if len(magic) < 4 or magic not in (MAGIC_MODEL, MAGIC_ACTIVATIONS, MAGIC_CORPUS):
        raise ContainerError("not a recognized container file")
    if magic != expected_magic:
        raise ContainerError(f"magic bytes {magic!r} do not match expected "
                             f"{expected_magic!r}")
    raw = f.read(4 + 8)
    if len(raw) < 12:
        raise ContainerError("truncated header")
    version, manifest_len = struct.unpack("<I", raw[:4])[0], struct.unpack("<Q", raw[4:])[0]
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    blob = f.read(manifest_len)
    if len(blob) != manifest_len:
        raise ContainerError("truncated manifest")
    try:
        return json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"corrupt manifest: {e}") from None
