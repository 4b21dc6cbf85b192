"""Model-modification and forgery attacks on saved checkpoints.

Every attack is a pure function of (checkpoint state, config, seed) and
receives only checkpoint-level data: the adversary can read and write
global parameters but holds no client key file, so surrogate transposed
models start from zero-initialized (mean 0 / var 1) watermark-mode BN
statistics.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from fedwmlab.metrics import SsimConfig, ssim
from fedwmlab.model import ArchConfig, build_model
from fedwmlab.seeding import derive_seed
from fedwmlab.training import contrastive_loss, evaluate_accuracy
from fedwmlab.transpose import build_transposed
from fedwmlab.watermark import (ExtractionVector, WatermarkImage,
                                augment_vectors, calibrate_sigma,
                                generate_extraction_vector)

QUANT_BITS = (2, 4, 8, 16)


@dataclass
class AttackConfig:
    """Attack selection plus kind-specific knobs."""

    kind: str
    ratio: float = 0.4            # prune
    rounds: int = 15              # finetune / overwrite epochs
    lr: float = 0.001             # finetune lr
    bits: int = 8                 # quantize
    mode: str = "untargeted"      # forge
    steps: int = 500              # forge optimization steps
    attempts: int = 50            # forge attempts
    tau_list: tuple = (0.1, 0.3, 0.5, 0.7, 0.9)
    forge_lr: float = 0.05
    use_main_data: bool = True    # overwrite: include main-task batches
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("prune", "finetune", "quantize", "overwrite", "forge"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError("prune ratio must lie in [0, 1)")
        if self.bits not in QUANT_BITS:
            raise ValueError(f"bits must be one of {QUANT_BITS}")
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")
        if self.mode not in ("targeted", "untargeted"):
            raise ValueError(f"unknown forge mode {self.mode!r}")


def _weight_keys(state: dict) -> list:
    return [k for k in state if "@" not in k and k.endswith(".weight")]


def prune(state: dict, ratio: float) -> dict:
    """Global magnitude pruning: zero the `ratio` fraction of smallest-|w|
    conv/linear weights (biases and BN parameters are untouched)."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("prune ratio must lie in [0, 1)")
    out = {k: np.array(v, copy=True) for k, v in state.items()}
    if ratio == 0.0:
        return out
    keys = _weight_keys(out)
    flat = np.concatenate([np.abs(out[k]).ravel() for k in keys])
    k_zero = int(round(ratio * flat.size))
    if k_zero == 0:
        return out
    order = np.argsort(flat, kind="stable")[:k_zero]
    mask = np.ones(flat.size, dtype=bool)
    mask[order] = False
    offset = 0
    for key in keys:
        size = out[key].size
        keep = mask[offset:offset + size].reshape(out[key].shape)
        out[key] = (out[key] * keep).astype(np.float32)
        offset += size
    return out


def quantize(state: dict, bits: int) -> dict:
    """Per-tensor symmetric uniform quantize-dequantize of conv/linear weights."""
    if bits not in QUANT_BITS:
        raise ValueError(f"bits must be one of {QUANT_BITS}")
    qmax = 2 ** (bits - 1) - 1
    out = {k: np.array(v, copy=True) for k, v in state.items()}
    for key in _weight_keys(out):
        arr = out[key].astype(np.float64)
        peak = float(np.abs(arr).max())
        if peak == 0.0:
            continue
        scale = peak / qmax
        out[key] = (np.round(arr / scale) * scale).astype(np.float32)
    return out


def finetune(arch: ArchConfig, state: dict, images, labels, rounds: int,
             lr: float = 0.001, batch: int = 64, seed: int = 0) -> dict:
    """Main-task-only SGD on a holdout shard; the watermark loss is absent
    and watermark-mode BN statistics are never exercised."""
    model = build_model(arch)
    model.load_state(state, load_watermark_bn=True)
    model.train()
    model.set_bn_mode("main")
    opt = torch.optim.SGD(model.store.tensors(), lr=lr)
    rng = np.random.default_rng(derive_seed(seed, "finetune"))
    labels_t = np.asarray(labels)
    for _ in range(rounds):
        order = rng.permutation(len(images))
        for start in range(0, len(images), batch):
            take = order[start:start + batch]
            if len(take) < 2:
                continue  # train-mode BN needs more than one sample
            logits = model.forward_main(images[take])
            loss = torch.nn.functional.cross_entropy(
                logits, torch.as_tensor(labels_t[take]))
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model.export_state(include_watermark_bn=True)


@dataclass
class AttackerKey:
    """The overwriting adversary's claim material."""

    vector: ExtractionVector
    bn_stats: dict
    wm_image: WatermarkImage


@dataclass
class OverwriteResult:
    state: dict
    attacker: AttackerKey


def overwrite(arch: ArchConfig, state: dict, attacker_wm: WatermarkImage,
              rounds: int, seed: int = 0, lr: float = 0.05,
              main_images=None, main_labels=None, lam: float = 1.0,
              y_w: float = 0.3, margin: float = 0.5, num_vectors: int = 100,
              batch_wm: int = 32, batch_main: int = 64,
              delta: float = 0.95) -> OverwriteResult:
    """Replicate the watermark-embedding procedure with a fresh random
    vector, the attacker's own image, and zero-initialized watermark BN
    statistics (no client statistics are available to the adversary)."""
    model = build_model(arch)
    model.load_state(state)  # fresh zero-init watermark BN stats
    tmodel = build_transposed(model)
    vector = generate_extraction_vector(derive_seed(seed, "atk-vector"),
                                        arch.num_classes)
    sigma = calibrate_sigma(vector, delta, seed=derive_seed(seed, "atk-sigma"))
    opt = torch.optim.SGD(model.store.tensors(), lr=lr, momentum=0.9)
    rng = np.random.default_rng(derive_seed(seed, "atk-shuffle"))
    use_main = main_images is not None and len(main_images) > 0
    model.train()
    for rnd in range(rounds):
        augset = augment_vectors(vector, num_vectors, sigma, delta,
                                 seed=derive_seed(seed, "atk-aug", rnd))
        if use_main:
            steps = math.ceil(len(main_images) / batch_main)
            main_order = rng.permutation(len(main_images))
        else:
            steps = math.ceil(num_vectors / batch_wm)
        wm_order = rng.permutation(num_vectors)
        cursor = 0
        for step in range(steps):
            loss = None
            if use_main:
                take = main_order[step * batch_main:(step + 1) * batch_main]
                if len(take) < 2:
                    continue
                model.set_bn_mode("main")
                logits = model.forward_main(main_images[take])
                loss = torch.nn.functional.cross_entropy(
                    logits, torch.as_tensor(np.asarray(main_labels)[take]))
            if cursor + batch_wm > num_vectors:
                wm_order = rng.permutation(num_vectors)
                cursor = 0
            pick = wm_order[cursor:cursor + batch_wm]
            cursor += batch_wm
            model.set_bn_mode("watermark")
            outputs = tmodel.forward(augset.vectors[pick])
            wm_loss = contrastive_loss(outputs, augset.labels[pick], attacker_wm,
                                       y_w, margin)
            loss = lam * wm_loss if loss is None else loss + lam * wm_loss
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.set_bn_mode("main")
    attacker = AttackerKey(vector=vector,
                           bn_stats=model.bn.export("watermark"),
                           wm_image=attacker_wm)
    return OverwriteResult(state=model.export_state(include_watermark_bn=False),
                           attacker=attacker)


def extract_watermark(arch: ArchConfig, state: dict, vector_values,
                      bn_stats: dict = None) -> np.ndarray:
    """Eval-mode reconstruction T(v) from raw state, quantized to the 8-bit
    grid so scores match what a verifier computes on emitted images."""
    model = build_model(arch)
    model.load_state(state)
    if bn_stats is not None:
        model.bn.load("watermark", bn_stats)
    model.eval()
    model.set_bn_mode("watermark")
    tmodel = build_transposed(model)
    with torch.no_grad():
        out = tmodel.forward(np.asarray(vector_values, dtype=np.float32)[None, :])
    clamped = out[0].clamp(0.0, 1.0).numpy()
    return np.round(clamped * 255.0).astype(np.float32) / 255.0


@dataclass
class ForgeResult:
    ssims: list
    asr_table: dict
    mode: str


def forge(arch: ArchConfig, state: dict, true_wm, mode: str, steps: int,
          attempts: int, tau_list, seed: int = 0, lr: float = 0.05,
          ssim_cfg: SsimConfig = None) -> ForgeResult:
    """Optimize counterfeit vectors against the surrogate transposed model.

    Targeted mode drives T(v_atk) toward the true watermark; untargeted
    mode toward a fresh random image per attempt. Success is judged by the
    SSIM of the verifier-side reconstruction (surrogate BN statistics,
    eval mode) against the true watermark. Attempts are independent and
    run as one batched optimization.
    """
    from fedwmlab.metrics import asr as asr_metric

    height, width, channels = arch.input_shape
    pixels = true_wm.pixels if isinstance(true_wm, WatermarkImage) else np.asarray(true_wm)
    model = build_model(arch)
    model.load_state(state)  # surrogate: zero-init watermark BN statistics
    model.eval()
    model.set_bn_mode("watermark")
    tmodel = build_transposed(model)

    rng = np.random.default_rng(derive_seed(seed, "forge", mode))
    v_atk = torch.tensor(rng.uniform(-1.0, 1.0, size=(attempts, arch.num_classes)),
                         dtype=torch.float32, requires_grad=True)
    if mode == "targeted":
        targets = np.broadcast_to(pixels, (attempts,) + pixels.shape).copy()
    else:
        targets = rng.uniform(0.0, 1.0,
                              size=(attempts, height, width, channels))
    targets_t = torch.as_tensor(targets, dtype=torch.float32)

    opt = torch.optim.Adam([v_atk], lr=lr)
    for _ in range(steps):
        out = tmodel.forward(v_atk)
        sq = (out - targets_t).pow(2).sum(dim=(1, 2, 3))
        loss = torch.sqrt(sq + 1e-12).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()

    with torch.no_grad():
        final = tmodel.forward(v_atk.detach()).clamp(0.0, 1.0)
    emitted = torch.round(final * 255.0) / 255.0
    reference = torch.as_tensor(pixels, dtype=torch.float32)
    reference = reference.unsqueeze(0).expand_as(emitted)
    scores = ssim(emitted, reference, cfg=ssim_cfg, per_sample=True)
    ssims = [float(s) for s in scores]
    table = {float(tau): asr_metric(ssims, tau) for tau in tau_list}
    return ForgeResult(ssims=ssims, asr_table=table, mode=mode)


def attack_accuracy(arch: ArchConfig, state: dict, images, labels) -> float:
    """Main-task accuracy of a (possibly attacked) checkpoint state."""
    model = build_model(arch)
    model.load_state(state)
    return evaluate_accuracy(model, images, labels)
