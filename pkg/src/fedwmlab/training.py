"""Joint main-task + watermark-task training for one client round.

Each optimization step interleaves one main-task batch (BN mode "main",
cross-entropy) with one watermark batch (BN mode "watermark", contrastive
similarity loss on the transposed model's output) and applies a single
SGD step on the combined objective. The uploaded update is the full
parameter vector plus main-mode BN statistics; watermark-mode statistics
never leave the client.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from fedwmlab.metrics import SsimConfig, ssim
from fedwmlab.model import ModelGraph
from fedwmlab.seeding import derive_seed
from fedwmlab.transpose import TransposedModel
from fedwmlab.watermark import (AugmentedVectorSet, ExtractionVector,
                                WatermarkImage, augment_vectors)


@dataclass
class TrainConfig:
    """Client-side hyperparameters for the joint objective."""

    lam: float = 1.0            # weight of the watermark loss in the joint objective
    y_w: float = 0.3            # positive-branch weight in the contrastive loss
    margin: float = 0.5         # negative-branch similarity margin
    local_epochs: int = 4
    batch_main: int = 32
    batch_wm: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    grad_clip: float = 1.0      # max grad norm per step; 0 disables clipping
    seed: int = 0
    contrastive_enabled: bool = True
    num_vectors: int = 100      # augmented vectors regenerated per round
    sigma: Optional[float] = None  # None: use the client's calibrated value
    delta: float = 0.95
    # Loss-side SSIM stabilizers: pure-SSIM training saturates and the scale
    # runs away with the canonical (0.01, 0.03)^2 constants on [0,1] images;
    # a wider dynamic range keeps gradients alive. Reported/verification
    # SSIM always uses the canonical config.
    loss_ssim: SsimConfig = field(default_factory=lambda: SsimConfig(data_range=16.0))

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0.0 < self.y_w < 1.0:
            raise ValueError("y_w must lie in (0, 1)")
        if not 0.0 < self.margin < 1.0:
            raise ValueError("margin must lie in (0, 1)")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.num_vectors < 0:
            raise ValueError("num_vectors must be >= 0")


@dataclass
class ClientState:
    """One simulated client: shard, secret key material, and its model pair.

    The model holds the client's watermark-mode BN statistics across
    rounds; they are preserved when global parameters are loaded.
    """

    client_id: int
    indices: np.ndarray
    vector: ExtractionVector
    wm_image: WatermarkImage
    seed: int
    sigma: float
    model: ModelGraph
    tmodel: TransposedModel

    def watermark_bn(self) -> dict:
        return self.model.bn.export("watermark")


@dataclass
class LocalHooks:
    """Scheme-specific client hooks (FedProx proximal, SCAFFOLD correction)."""

    prox_mu: float = 0.0
    prox_ref: Optional[dict] = None
    control_server: Optional[dict] = None
    control_client: Optional[dict] = None


@dataclass
class LocalResult:
    state: dict
    num_samples: int
    main_loss: float
    wm_loss: float
    ssim_value: float
    steps: int
    new_control: Optional[dict] = None


def contrastive_loss(outputs, labels, wm, y_w: float, margin: float,
                     ssim_cfg: SsimConfig = None) -> torch.Tensor:
    """Margin contrastive loss over a labeled reconstruction batch.

    Positives contribute y_w * (1 - SSIM(out, wm)); negatives contribute
    (1 - y_w) * max(0, margin - SSIM(out, wm)); the result is the batch
    mean and stays differentiable through the SSIM.
    """
    outputs = torch.as_tensor(outputs)
    if outputs.shape[0] == 0:
        raise ValueError("contrastive_loss needs a non-empty batch")
    pixels = wm.pixels if isinstance(wm, WatermarkImage) else wm
    target = torch.as_tensor(pixels, dtype=outputs.dtype)
    if tuple(target.shape) != tuple(outputs.shape[1:]):
        raise ValueError(
            f"watermark shape {tuple(target.shape)} does not match outputs "
            f"{tuple(outputs.shape[1:])}")
    target = target.unsqueeze(0).expand_as(outputs)
    scores = ssim(outputs, target, cfg=ssim_cfg, per_sample=True)
    is_pos = torch.as_tensor(np.asarray(labels, dtype=bool))
    if is_pos.shape[0] != outputs.shape[0]:
        raise ValueError("labels and outputs are misaligned")
    pos_term = y_w * (1.0 - scores)
    neg_term = (1.0 - y_w) * torch.relu(margin - scores)
    return torch.where(is_pos, pos_term, neg_term).mean()


def reconstruction_loss(outputs, wm, ssim_cfg: SsimConfig = None) -> torch.Tensor:
    """Positive-branch-only loss mean(1 - SSIM): the non-contrastive ablation."""
    outputs = torch.as_tensor(outputs)
    if outputs.shape[0] == 0:
        raise ValueError("reconstruction_loss needs a non-empty batch")
    pixels = wm.pixels if isinstance(wm, WatermarkImage) else wm
    target = torch.as_tensor(pixels, dtype=outputs.dtype)
    target = target.unsqueeze(0).expand_as(outputs)
    return (1.0 - ssim(outputs, target, cfg=ssim_cfg, per_sample=True)).mean()


def joint_loss(main_loss, c_loss, lam: float):
    """Joint objective: main loss plus lam times the watermark loss."""
    return main_loss + lam * c_loss


def proximal_term(local, global_ref, mu: float):
    """(mu/2) * ||local - global_ref||^2 over matching parameter names."""
    if mu == 0.0:
        return torch.zeros(())
    total = None
    for name, value in local.items():
        p = value if isinstance(value, torch.Tensor) else torch.as_tensor(value)
        ref = torch.as_tensor(np.asarray(global_ref[name]), dtype=p.dtype)
        term = (p - ref).pow(2).sum()
        total = term if total is None else total + term
    return 0.5 * mu * total


def evaluate_accuracy(model: ModelGraph, images, labels, batch: int = 256) -> float:
    """Top-1 accuracy in eval mode (main BN statistics)."""
    was_training, prev_mode = model.training, model.bn_mode
    model.eval()
    model.set_bn_mode("main")
    correct = 0
    with torch.no_grad():
        for start in range(0, len(images), batch):
            scores = model.forward_main(images[start:start + batch])
            pred = scores.argmax(dim=1).numpy()
            correct += int((pred == labels[start:start + batch]).sum())
    model.train(was_training)
    model.set_bn_mode(prev_mode)
    return correct / len(images)


def refresh_watermark_stats(client: ClientState, passes: int = 40,
                            batch: int = 128, seed: int = None,
                            delta: float = 0.95):
    """Re-estimate the client's watermark-mode BN statistics against the
    currently loaded parameters.

    Aggregation shifts the global parameters after the client's last local
    step, so the running moments recorded during training lag the final
    model. Forward passes over freshly augmented vectors (no parameter
    updates) re-center them; deterministic given the seed.
    """
    model, tmodel = client.model, client.tmodel
    base_seed = client.seed if seed is None else seed
    was_training, prev_mode = model.training, model.bn_mode
    model.train()
    model.set_bn_mode("watermark")
    with torch.no_grad():
        for i in range(passes):
            augset = augment_vectors(
                client.vector, batch, client.sigma, delta,
                seed=derive_seed(base_seed, "bn-refresh", i))
            tmodel.forward(augset.vectors)
    model.train(was_training)
    model.set_bn_mode(prev_mode)


def watermark_ssim(client: ClientState, ssim_cfg: SsimConfig = None) -> float:
    """Eval-mode SSIM of the clamped reconstruction against the client's wm."""
    model, tmodel = client.model, client.tmodel
    was_training, prev_mode = model.training, model.bn_mode
    model.eval()
    model.set_bn_mode("watermark")
    with torch.no_grad():
        out = tmodel.forward(client.vector.values[None, :]).clamp(0.0, 1.0)
    model.train(was_training)
    model.set_bn_mode(prev_mode)
    return float(ssim(out[0], torch.as_tensor(client.wm_image.pixels), cfg=ssim_cfg))


def _wm_batches(augset: AugmentedVectorSet, batch_size: int, steps: int,
                rng: np.random.Generator, positives_only: bool):
    vectors, labels = augset.vectors, augset.labels
    if positives_only:
        vectors, labels = vectors[labels], labels[labels]
    pool = len(vectors)
    size = min(batch_size, pool)
    order = rng.permutation(pool)
    cursor = 0
    for _ in range(steps):
        if cursor + size > pool:
            order = rng.permutation(pool)
            cursor = 0
        take = order[cursor:cursor + size]
        cursor += size
        yield vectors[take], labels[take]


def local_round(client: ClientState, global_state: dict, cfg: TrainConfig,
                train_images, train_labels, round_index: int = 0,
                hooks: LocalHooks = None) -> LocalResult:
    """Run one client's local round of the federated algorithm.

    Loads the broadcast state (keeping the client's watermark-mode BN
    statistics), regenerates the augmented vector set for this round, and
    interleaves main/watermark batches 1:1 per SGD step on the joint loss.
    """
    hooks = hooks or LocalHooks()
    model, tmodel = client.model, client.tmodel
    model.load_state(global_state)
    model.train()

    shard_x = train_images[client.indices]
    shard_y = train_labels[client.indices]
    n = len(shard_x)
    if n == 0:
        raise ValueError(f"client {client.client_id} has an empty shard")

    wm_enabled = cfg.num_vectors > 0
    if wm_enabled:
        sigma = cfg.sigma if cfg.sigma is not None else client.sigma
        augset = augment_vectors(
            client.vector, cfg.num_vectors, sigma, cfg.delta,
            seed=derive_seed(cfg.seed, "augment", round_index, client.client_id))

    steps_per_epoch = math.ceil(n / cfg.batch_main)
    total_steps = steps_per_epoch * cfg.local_epochs
    rng = np.random.default_rng(
        derive_seed(cfg.seed, "shuffle", round_index, client.client_id))
    wm_iter = None
    if wm_enabled:
        rng_wm = np.random.default_rng(
            derive_seed(cfg.seed, "wmbatch", round_index, client.client_id))
        wm_iter = _wm_batches(augset, cfg.batch_wm, total_steps, rng_wm,
                              positives_only=not cfg.contrastive_enabled)

    opt = torch.optim.SGD(model.store.tensors(), lr=cfg.lr, momentum=cfg.momentum)
    prox_ref = None
    if hooks.prox_mu > 0.0 and hooks.prox_ref is not None:
        prox_ref = {name: torch.as_tensor(np.asarray(hooks.prox_ref[name]),
                                          dtype=model.dtype)
                    for name in model.store.names() if name in hooks.prox_ref}
    correction = None
    if hooks.control_server is not None:
        correction = {
            name: torch.as_tensor(
                np.asarray(hooks.control_server[name])
                - np.asarray(hooks.control_client[name]), dtype=model.dtype)
            for name in model.store.names()}

    main_losses, wm_losses = [], []
    step = 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_main):
            take = order[start:start + cfg.batch_main]
            if len(take) < 2:
                continue  # train-mode BN cannot estimate stats from one sample
            xb, yb = shard_x[take], torch.as_tensor(shard_y[take])
            model.set_bn_mode("main")
            logits = model.forward_main(xb)
            loss_main = F.cross_entropy(logits, yb)
            loss = loss_main
            if prox_ref is not None:
                loss = loss + proximal_term(
                    dict(model.store.items()), prox_ref, hooks.prox_mu)
            loss_wm = None
            if wm_enabled:
                vb, lb = next(wm_iter)
                model.set_bn_mode("watermark")
                outputs = tmodel.forward(vb)
                if cfg.contrastive_enabled:
                    loss_wm = contrastive_loss(outputs, lb, client.wm_image,
                                               cfg.y_w, cfg.margin, cfg.loss_ssim)
                else:
                    loss_wm = reconstruction_loss(outputs, client.wm_image,
                                                  cfg.loss_ssim)
                loss = joint_loss(loss, loss_wm, cfg.lam)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at round {round_index}, client "
                    f"{client.client_id}, step {step}: {float(loss)}")
            opt.zero_grad()
            loss.backward()
            if correction is not None:
                for name, p in model.store.items():
                    delta = correction[name]
                    p.grad = delta.clone() if p.grad is None else p.grad + delta
            if cfg.grad_clip > 0.0:
                torch.nn.utils.clip_grad_norm_(model.store.tensors(), cfg.grad_clip)
            opt.step()
            main_losses.append(float(loss_main.detach()))
            if loss_wm is not None:
                wm_losses.append(float(loss_wm.detach()))
            step += 1

    model.set_bn_mode("main")
    new_control = None
    if hooks.control_server is not None:
        local = model.store.export()
        new_control = {}
        for name in local:
            grad_est = (np.asarray(global_state[name]) - local[name]) / (
                step * cfg.lr)
            new_control[name] = (np.asarray(hooks.control_client[name])
                                 - np.asarray(hooks.control_server[name])
                                 + grad_est).astype(np.float32)

    return LocalResult(
        state=model.export_state(),
        num_samples=n,
        main_loss=float(np.mean(main_losses)),
        wm_loss=float(np.mean(wm_losses)) if wm_losses else 0.0,
        ssim_value=watermark_ssim(client) if wm_enabled else 0.0,
        steps=step,
        new_control=new_control)
