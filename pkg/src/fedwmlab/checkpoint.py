"""Versioned binary container for checkpoints and watermark keys.

Layout: 4-byte magic, u32 container version, u32 header length, then a
UTF-8 JSON header (kind, format version, architecture descriptor,
metadata, tensor names + shapes), followed by each tensor's raw data as
little-endian float32 in C order, in header order. Tensor names are
sorted so identical states produce identical bytes.
"""

import json
import struct

import numpy as np

from fedwmlab.model import ArchConfig, ModelGraph, build_model

MAGIC = b"FWLB"
FORMAT_VERSION = 1


class ArchiveError(ValueError):
    """Corrupt, truncated, or wrong-version archive file."""


def write_archive(path, kind: str, arch: dict, meta: dict, tensors: dict):
    names = sorted(tensors)
    header = {
        "kind": kind,
        "format_version": FORMAT_VERSION,
        "arch": arch,
        "meta": meta,
        "tensors": [{"name": n, "shape": list(np.asarray(tensors[n]).shape)}
                    for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for name in names:
            arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
            fh.write(arr.tobytes())


def read_archive(path, expect_kind: str = None):
    """Read an archive; returns (arch dict, meta dict, tensors dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ArchiveError(f"{path}: not a fedwmlab archive (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise ArchiveError(
            f"{path}: unsupported archive version {version} "
            f"(this build reads {FORMAT_VERSION})")
    if len(raw) < 12 + header_len:
        raise ArchiveError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: corrupt header: {exc}") from exc
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise ArchiveError(
            f"{path}: archive kind {header.get('kind')!r}, expected {expect_kind!r}")
    tensors = {}
    offset = 12 + header_len
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise ArchiveError(f"{path}: truncated tensor data at {entry['name']}")
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype="<f4")
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(raw):
        raise ArchiveError(f"{path}: {len(raw) - offset} trailing bytes")
    return header.get("arch"), header.get("meta", {}), tensors


def save_checkpoint(path, model: ModelGraph, meta: dict = None):
    """Persist learnable parameters, both BN statistic sets, and the arch."""
    state = model.export_state(include_watermark_bn=True)
    write_archive(path, "checkpoint", model.arch.to_json(), meta or {}, state)


def load_checkpoint(path):
    """Returns (ArchConfig, state dict, meta dict)."""
    arch, meta, tensors = read_archive(path, expect_kind="checkpoint")
    return ArchConfig.from_json(arch), tensors, meta


def model_from_checkpoint(path) -> ModelGraph:
    """Rebuild a ModelGraph (eval mode) from a checkpoint file."""
    arch, state, _ = load_checkpoint(path)
    model = build_model(arch, seed=0)
    model.load_state(state, load_watermark_bn=True)
    return model.eval()
