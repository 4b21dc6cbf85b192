"""Watermark key files.

A key holds everything the verifier needs besides the checkpoint: the
client's extraction vector, its watermark-mode BN statistics, and a
digest + path of the reference watermark image. Keys use the same
versioned binary container as checkpoints.
"""

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from fedwmlab.checkpoint import ArchiveError, read_archive, write_archive
from fedwmlab.model import ArchConfig
from fedwmlab.watermark import (ExtractionVector, WatermarkImage,
                                load_watermark, save_watermark_png)

BN_PREFIX = "bn:"


class KeyError_(ArchiveError):
    """Corrupt or inconsistent key file."""


@dataclass
class WatermarkKey:
    client_id: int
    vector: ExtractionVector
    bn_stats: dict           # watermark-mode running statistics, name -> array
    image_digest: str
    image_path: str          # relative to the key file's directory when not absolute
    creation_round: int
    format_version: int
    arch: ArchConfig
    key_path: str = ""

    def resolve_image_path(self) -> str:
        if os.path.isabs(self.image_path):
            return self.image_path
        return os.path.join(os.path.dirname(self.key_path), self.image_path)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def save_key(client, path, arch: ArchConfig, creation_round: int):
    """Persist a client's verification secret plus its reference image.

    The reference watermark is re-emitted as a lossless PNG beside the key
    so the stored digest always matches the trained-against pixels.
    """
    path = str(path)
    image_name = os.path.splitext(os.path.basename(path))[0] + "_wm.png"
    image_path = os.path.join(os.path.dirname(path) or ".", image_name)
    save_watermark_png(client.wm_image.pixels, image_path)
    meta = {
        "client_id": int(client.client_id),
        "creation_round": int(creation_round),
        "vector_seed": int(client.vector.seed),
        "image_digest": file_digest(image_path),
        "image_path": image_name,
    }
    tensors = {"vector": client.vector.values}
    for name, arr in client.watermark_bn().items():
        tensors[BN_PREFIX + name] = arr
    write_archive(path, "key", arch.to_json(), meta, tensors)


def load_key(path) -> WatermarkKey:
    """Load and validate a key file; raises on corruption or bad shapes."""
    path = str(path)
    arch_json, meta, tensors = read_archive(path, expect_kind="key")
    arch = ArchConfig.from_json(arch_json)
    if "vector" not in tensors:
        raise KeyError_(f"{path}: key file has no extraction vector")
    values = tensors["vector"]
    if values.shape != (arch.num_classes,):
        raise KeyError_(
            f"{path}: vector length {values.shape[0]} does not match the "
            f"recorded architecture's {arch.num_classes} classes")
    bn_stats = {k[len(BN_PREFIX):]: v for k, v in tensors.items()
                if k.startswith(BN_PREFIX)}
    vector = ExtractionVector(values=np.asarray(values, dtype=np.float32),
                              seed=int(meta["vector_seed"]))
    return WatermarkKey(
        client_id=int(meta["client_id"]),
        vector=vector,
        bn_stats=bn_stats,
        image_digest=str(meta["image_digest"]),
        image_path=str(meta["image_path"]),
        creation_round=int(meta["creation_round"]),
        format_version=1,
        arch=arch,
        key_path=path)


def load_key_image(key: WatermarkKey) -> WatermarkImage:
    """Load the reference watermark, enforcing the stored digest."""
    path = key.resolve_image_path()
    if not os.path.exists(path):
        raise KeyError_(f"reference watermark image missing: {path}")
    digest = file_digest(path)
    if digest != key.image_digest:
        raise KeyError_(
            f"reference watermark digest mismatch for {path}: stored "
            f"{key.image_digest[:12]}..., file {digest[:12]}...")
    height, width, channels = key.arch.input_shape
    return load_watermark(path, (height, width, channels))
