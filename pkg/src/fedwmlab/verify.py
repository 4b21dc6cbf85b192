"""Ownership verification against a checkpoint.

The verifier rebuilds the transposed model from the checkpoint, installs
the key's watermark-mode BN statistics, reconstructs the watermark from
the extraction vector in eval mode, and passes iff the SSIM against the
reference image reaches the threshold. The reported SSIM is computed on
the 8-bit pixels actually written to disk, so recomputing it from the
emitted file reproduces the report value exactly.
"""

import datetime
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch

from fedwmlab.checkpoint import load_checkpoint
from fedwmlab.keys import WatermarkKey, load_key, load_key_image
from fedwmlab.metrics import SsimConfig, mse, psnr, ssim
from fedwmlab.model import build_model
from fedwmlab.transpose import build_transposed
from fedwmlab.watermark import save_watermark_png


@dataclass
class VerificationReport:
    checkpoint: str
    key: str
    tau: float
    ssim: float
    mse: float
    psnr: float
    passed: bool
    image_path: str
    timestamp: str

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def to_json(self) -> dict:
        out = asdict(self)
        out["verdict"] = self.verdict
        out["psnr"] = "inf" if self.psnr == float("inf") else self.psnr
        return out


def reconstruct_watermark(checkpoint_path, key: WatermarkKey) -> np.ndarray:
    """Rebuild the transposed model and emit the clamped reconstruction."""
    arch, state, _ = load_checkpoint(checkpoint_path)
    if arch.to_json() != key.arch.to_json():
        raise ValueError(
            f"checkpoint architecture does not match the key's: checkpoint has "
            f"{arch.num_classes} classes / input {arch.input_shape}, key has "
            f"{key.arch.num_classes} classes / input {key.arch.input_shape}")
    model = build_model(arch)
    model.load_state(state, load_watermark_bn=True)
    model.bn.load("watermark", key.bn_stats)
    model.eval()
    model.set_bn_mode("watermark")
    tmodel = build_transposed(model)
    with torch.no_grad():
        out = tmodel.forward(key.vector.values[None, :]).clamp(0.0, 1.0)
    return out[0].numpy()


def verify(checkpoint_path, key, tau: float, out_image=None,
           ssim_cfg: SsimConfig = None) -> VerificationReport:
    """Run the verification protocol; read-only on the checkpoint file."""
    if not isinstance(key, WatermarkKey):
        key = load_key(key)
    reference = load_key_image(key)
    raw = reconstruct_watermark(checkpoint_path, key)
    if out_image is None:
        out_image = os.path.join(
            os.path.dirname(os.path.abspath(checkpoint_path)),
            f"verify_client{key.client_id}_wm.png")
    emitted = save_watermark_png(raw, out_image)
    score = float(ssim(emitted, reference.pixels, cfg=ssim_cfg))
    return VerificationReport(
        checkpoint=str(checkpoint_path),
        key=str(key.key_path),
        tau=float(tau),
        ssim=score,
        mse=float(mse(emitted, reference.pixels)),
        psnr=psnr(emitted, reference.pixels),
        passed=bool(score >= tau),
        image_path=str(out_image),
        timestamp=datetime.datetime.now(datetime.timezone.utc).isoformat())
