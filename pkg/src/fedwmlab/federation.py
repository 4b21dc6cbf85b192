"""Federated orchestration: partitioning, aggregation schemes, round loop.

Rounds are sequential barriers; within a round each client's local_round
owns its model pair exclusively. Aggregators are interchangeable behind
one interface: only the FedProx proximal hook and the SCAFFOLD control
correction touch the client side. Client watermark-mode BN statistics
never enter aggregation.
"""

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from fedwmlab import keys as keysmod
from fedwmlab.checkpoint import save_checkpoint
from fedwmlab.data import Dataset, load_dataset
from fedwmlab.metrics import cosine
from fedwmlab.model import ArchConfig, build_model, tiny_vgg
from fedwmlab.seeding import derive_seed
from fedwmlab.training import (ClientState, LocalHooks, LocalResult, TrainConfig,
                               evaluate_accuracy, local_round,
                               refresh_watermark_stats, watermark_ssim)
from fedwmlab.transpose import build_transposed
from fedwmlab.watermark import (calibrate_sigma, generate_extraction_vector,
                                load_watermark, pattern_image, save_watermark_png)

SCHEMES = ("fedavg", "fedprox", "fedpaq", "fedadam", "scaffold")


@dataclass
class AggregatorConfig:
    """Aggregation scheme selection plus scheme hyperparameters."""

    scheme: str = "fedavg"
    rounds: int = 50
    mu: float = 0.01              # fedprox proximal weight
    levels: int = 256             # fedpaq quantization levels
    beta1: float = 0.9            # fedadam moments
    beta2: float = 0.99
    tau_adapt: float = 1e-3
    server_lr: float = 1e-2       # fedadam server step
    scaffold_server_lr: float = 1.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown aggregation scheme {self.scheme!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        for name in ("mu", "levels", "beta1", "beta2", "tau_adapt", "server_lr",
                     "scaffold_server_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.levels < 2:
            raise ValueError("levels must be >= 2")


def dirichlet_partition(labels, n: int, alpha: float, seed: int,
                        max_retries: int = 20) -> list:
    """Dirichlet(alpha) Non-IID split of label indices into n shards.

    Per class, a Dirichlet draw allocates that class's indices across
    clients. Draws leaving a client empty are retried up to max_retries,
    then patched round-robin from the largest shards, so every client ends
    up with at least one sample. Shards are disjoint and cover all indices.
    """
    labels = np.asarray(labels)
    if n < 2:
        raise ValueError("need at least 2 clients")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if len(labels) < n:
        raise ValueError(f"dataset of {len(labels)} samples cannot cover {n} clients")

    def draw(rng):
        shards = [[] for _ in range(n)]
        for cls in np.unique(labels):
            idx = np.flatnonzero(labels == cls)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(n, alpha))
            cuts = (np.cumsum(props) * len(idx)).astype(int)[:-1]
            for shard, part in zip(shards, np.split(idx, cuts)):
                shard.extend(part.tolist())
        return shards

    shards = None
    for attempt in range(max_retries):
        rng = np.random.default_rng(derive_seed(seed, "dirichlet", attempt))
        shards = draw(rng)
        if all(len(s) > 0 for s in shards):
            break
    while any(len(s) == 0 for s in shards):
        empty = min(range(n), key=lambda i: len(shards[i]))
        donor = max(range(n), key=lambda i: len(shards[i]))
        shards[empty].append(shards[donor].pop())
    return [np.array(sorted(s), dtype=np.int64) for s in shards]


# -- aggregation --------------------------------------------------------------


def normalized_weights(counts) -> np.ndarray:
    """Relative client weights n_i / N, adjusted to sum to exactly 1.0."""
    counts = np.asarray(counts, dtype=np.float64)
    weights = counts / counts.sum()
    weights[np.argmax(weights)] += 1.0 - weights.sum()
    return weights


def _weighted_mean(states: list, weights: np.ndarray) -> dict:
    out = {}
    for key in states[0]:
        acc = np.zeros_like(np.asarray(states[0][key], dtype=np.float64))
        for state, w in zip(states, weights):
            acc += w * np.asarray(state[key], dtype=np.float64)
        out[key] = acc.astype(np.float32)
    return out


def _clamp_bn_vars(state: dict) -> dict:
    for key in state:
        if key.endswith("running_var@main") or key.endswith("running_var@watermark"):
            np.maximum(state[key], 0.0, out=state[key])
    return state


def aggregate_fedavg(updates: list) -> dict:
    """Sample-count-weighted average of client states."""
    states = [u[0] for u in updates]
    weights = normalized_weights([u[1] for u in updates])
    return _clamp_bn_vars(_weighted_mean(states, weights))


def quantize_tensor(arr: np.ndarray, levels: int) -> np.ndarray:
    """Uniform min/max quantization to `levels` values per tensor."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return arr.astype(np.float32)
    scale = (hi - lo) / (levels - 1)
    return (np.round((arr - lo) / scale) * scale + lo).astype(np.float32)


def aggregate_fedpaq(updates: list, base_state: dict, levels: int) -> dict:
    """FedAvg over per-tensor uniformly quantized client deltas."""
    weights = normalized_weights([u[1] for u in updates])
    out = {}
    for key in base_state:
        base = np.asarray(base_state[key], dtype=np.float64)
        acc = np.zeros_like(base)
        for (state, _), w in zip(updates, weights):
            delta = np.asarray(state[key], dtype=np.float64) - base
            acc += w * quantize_tensor(delta, levels)
        out[key] = (base + acc).astype(np.float32)
    return _clamp_bn_vars(out)


def aggregate_fedadam(updates: list, base_state: dict, server_state: dict,
                      cfg: AggregatorConfig):
    """Adam-style server step on the weighted mean client delta.

    Moments cover learnable parameters; BN statistics are aggregated by
    weighted mean directly. Returns (new state, new server state).
    """
    weights = normalized_weights([u[1] for u in updates])
    learnable = [k for k in base_state if "@" not in k]
    m = dict(server_state.get("m", {}))
    v = dict(server_state.get("v", {}))
    out = {}
    for key in base_state:
        base = np.asarray(base_state[key], dtype=np.float64)
        delta = np.zeros_like(base)
        for (state, _), w in zip(updates, weights):
            delta += w * (np.asarray(state[key], dtype=np.float64) - base)
        if key in learnable:
            mk = cfg.beta1 * m.get(key, np.zeros_like(base)) + (1 - cfg.beta1) * delta
            vk = cfg.beta2 * v.get(key, np.zeros_like(base)) + (1 - cfg.beta2) * delta ** 2
            m[key], v[key] = mk, vk
            out[key] = (base + cfg.server_lr * mk / (np.sqrt(vk) + cfg.tau_adapt)
                        ).astype(np.float32)
        else:
            out[key] = (base + delta).astype(np.float32)
    return _clamp_bn_vars(out), {"m": m, "v": v}


class Aggregator:
    """Uniform server-side interface over the five schemes."""

    needs_control = False

    def __init__(self, cfg: AggregatorConfig):
        self.cfg = cfg

    def client_hooks(self, client_id: int, base_state: dict) -> LocalHooks:
        return LocalHooks()

    def aggregate(self, base_state: dict, results: list) -> dict:
        raise NotImplementedError


class FedAvgAggregator(Aggregator):
    def aggregate(self, base_state, results):
        return aggregate_fedavg([(r.state, r.num_samples) for r in results])


class FedProxAggregator(FedAvgAggregator):
    def client_hooks(self, client_id, base_state):
        ref = {k: v for k, v in base_state.items() if "@" not in k}
        return LocalHooks(prox_mu=self.cfg.mu, prox_ref=ref)


class FedPaqAggregator(Aggregator):
    def aggregate(self, base_state, results):
        return aggregate_fedpaq([(r.state, r.num_samples) for r in results],
                                base_state, self.cfg.levels)


class FedAdamAggregator(Aggregator):
    def __init__(self, cfg):
        super().__init__(cfg)
        self.server_state = {"m": {}, "v": {}}

    def aggregate(self, base_state, results):
        state, self.server_state = aggregate_fedadam(
            [(r.state, r.num_samples) for r in results], base_state,
            self.server_state, self.cfg)
        return state


class ScaffoldAggregator(Aggregator):
    """Control-variate correction; option-II client control updates."""

    needs_control = True

    def __init__(self, cfg):
        super().__init__(cfg)
        self.server_control = None
        self.client_controls = {}

    def _ensure_controls(self, client_id, base_state):
        learnable = [k for k in base_state if "@" not in k]
        if self.server_control is None:
            self.server_control = {k: np.zeros_like(base_state[k]) for k in learnable}
        if client_id not in self.client_controls:
            self.client_controls[client_id] = {
                k: np.zeros_like(base_state[k]) for k in learnable}

    def client_hooks(self, client_id, base_state):
        self._ensure_controls(client_id, base_state)
        return LocalHooks(control_server=self.server_control,
                          control_client=self.client_controls[client_id])

    def aggregate(self, base_state, results):
        weights = normalized_weights([r.num_samples for r in results])
        out = {}
        for key in base_state:
            base = np.asarray(base_state[key], dtype=np.float64)
            delta = np.zeros_like(base)
            for r, w in zip(results, weights):
                delta += w * (np.asarray(r.state[key], dtype=np.float64) - base)
            lr = self.cfg.scaffold_server_lr if "@" not in key else 1.0
            out[key] = (base + lr * delta).astype(np.float32)
        # c <- c + mean over clients of (c_i_new - c_i_old)
        ids = sorted(self.client_controls)
        for key in self.server_control:
            shift = np.zeros_like(self.server_control[key], dtype=np.float64)
            for cid, r in zip(ids, results):
                shift += (np.asarray(r.new_control[key], dtype=np.float64)
                          - self.client_controls[cid][key])
            self.server_control[key] = (
                self.server_control[key] + shift / len(results)).astype(np.float32)
        for cid, r in zip(ids, results):
            self.client_controls[cid] = {k: np.asarray(v, dtype=np.float32)
                                         for k, v in r.new_control.items()}
        return _clamp_bn_vars(out)


def make_aggregator(cfg: AggregatorConfig) -> Aggregator:
    return {
        "fedavg": FedAvgAggregator,
        "fedprox": FedProxAggregator,
        "fedpaq": FedPaqAggregator,
        "fedadam": FedAdamAggregator,
        "scaffold": ScaffoldAggregator,
    }[cfg.scheme](cfg)


# -- full runs -----------------------------------------------------------------


@dataclass
class RunConfig:
    """One experiment: dataset, architecture, clients, schedule, paths."""

    name: str = "run"
    master_seed: int = 0
    n_clients: int = 4
    alpha: float = 0.8
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic-gray"})
    arch: object = "tiny_vgg"      # preset name or ArchConfig JSON dict
    train: TrainConfig = field(default_factory=TrainConfig)
    agg: AggregatorConfig = field(default_factory=AggregatorConfig)
    holdout_fraction: float = 0.1
    watermark_enabled: bool = True
    checkpoint_interval: int = 0   # extra checkpoints every k rounds; 0 = final only
    eval_every: int = 1
    wm_images: Optional[list] = None  # file paths; None -> procedural patterns

    def to_json(self) -> dict:
        out = asdict(self)
        out["train"].pop("loss_ssim", None)
        return out


@dataclass
class RunResult:
    run_dir: str
    checkpoint_path: str
    key_paths: list
    history: list
    final_accuracy: float
    client_ssim: dict


def resolve_arch(arch, dataset: Dataset) -> ArchConfig:
    if isinstance(arch, ArchConfig):
        return arch
    if isinstance(arch, dict):
        return ArchConfig.from_json(arch)
    if arch == "tiny_vgg":
        return tiny_vgg(dataset.input_shape, dataset.num_classes)
    raise ValueError(f"unknown architecture preset {arch!r}")


def holdout_split(num_samples: int, fraction: float, seed: int):
    """Disjoint (holdout, pool) index split used for fine-tuning attacks."""
    perm = np.random.default_rng(derive_seed(seed, "holdout")).permutation(num_samples)
    cut = int(round(fraction * num_samples))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def build_clients(cfg: RunConfig, dataset: Dataset, arch: ArchConfig,
                  shards: list) -> list:
    """Create per-client state: vector, sigma, watermark image, model pair."""
    clients = []
    vectors = []
    for i in range(cfg.n_clients):
        vec = generate_extraction_vector(
            derive_seed(cfg.master_seed, "vector", i), dataset.num_classes)
        for other in vectors:
            if np.allclose(other.values, vec.values):
                raise RuntimeError(f"extraction vector collision for client {i}")
        vectors.append(vec)
        if cfg.wm_images:
            wm = load_watermark(cfg.wm_images[i % len(cfg.wm_images)],
                                dataset.input_shape)
        else:
            wm = pattern_image(i, dataset.input_shape)
        sigma = calibrate_sigma(vec, cfg.train.delta,
                                seed=derive_seed(cfg.master_seed, "sigma", i))
        model = build_model(arch, seed=derive_seed(cfg.master_seed, "client", i))
        clients.append(ClientState(
            client_id=i, indices=shards[i], vector=vec, wm_image=wm,
            seed=derive_seed(cfg.master_seed, "clientseed", i), sigma=sigma,
            model=model, tmodel=build_transposed(model)))
    return clients


def run_federation(cfg: RunConfig, run_dir) -> RunResult:
    """Execute the full federated schedule and persist the run directory.

    Layout: config.json snapshot, metrics.csv, checkpoints/round_%d.ckpt,
    keys/client_%d.key (+ reference watermark PNGs), images/ reconstructed
    watermarks per checkpoint interval. Fully reproducible from
    (config, master seed).
    """
    run_dir = str(run_dir)
    os.makedirs(run_dir, exist_ok=True)
    for sub in ("checkpoints", "keys", "images"):
        os.makedirs(os.path.join(run_dir, sub), exist_ok=True)

    dataset = load_dataset(cfg.dataset)
    arch = resolve_arch(cfg.arch, dataset)
    train_cfg = cfg.train
    if not cfg.watermark_enabled:
        train_cfg = replace(train_cfg, num_vectors=0)
    train_cfg = replace(train_cfg,
                        seed=derive_seed(cfg.master_seed, "train", cfg.name))

    hold_idx, pool_idx = holdout_split(len(dataset.train_labels),
                                       cfg.holdout_fraction, cfg.master_seed)
    shards_local = dirichlet_partition(
        dataset.train_labels[pool_idx], cfg.n_clients, cfg.alpha,
        derive_seed(cfg.master_seed, "partition"))
    shards = [pool_idx[s] for s in shards_local]

    clients = build_clients(cfg, dataset, arch, shards)
    global_model = build_model(arch, seed=derive_seed(cfg.master_seed, "init"))
    aggregator = make_aggregator(cfg.agg)

    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        snapshot = cfg.to_json()
        snapshot["holdout_indices"] = hold_idx.tolist()
        json.dump(snapshot, fh, indent=2, sort_keys=True)

    history = []
    csv_path = os.path.join(run_dir, "metrics.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "client", "accuracy", "main_loss",
                         "wm_loss", "ssim", "seconds"])
        for rnd in range(1, cfg.agg.rounds + 1):
            t0 = time.time()
            base = global_model.export_state()
            results = []
            for client in clients:
                hooks = aggregator.client_hooks(client.client_id, base)
                try:
                    result = local_round(client, base, train_cfg,
                                         dataset.train_images, dataset.train_labels,
                                         round_index=rnd, hooks=hooks)
                except Exception as exc:
                    raise RuntimeError(
                        f"round {rnd}, client {client.client_id}: {exc}") from exc
                results.append(result)
                row = {"round": rnd, "client": client.client_id, "accuracy": "",
                       "main_loss": result.main_loss, "wm_loss": result.wm_loss,
                       "ssim": result.ssim_value}
                history.append(row)
                writer.writerow([rnd, client.client_id, "", f"{result.main_loss:.6f}",
                                 f"{result.wm_loss:.6f}", f"{result.ssim_value:.6f}", ""])
            global_model.load_state(aggregator.aggregate(base, results))
            seconds = time.time() - t0
            accuracy = ""
            if cfg.eval_every and (rnd % cfg.eval_every == 0 or rnd == cfg.agg.rounds):
                accuracy = evaluate_accuracy(global_model, dataset.test_images,
                                             dataset.test_labels)
            row = {"round": rnd, "client": "global", "accuracy": accuracy,
                   "main_loss": "", "wm_loss": "",
                   "ssim": float(np.mean([r.ssim_value for r in results]))}
            history.append(row)
            writer.writerow([rnd, "global",
                             f"{accuracy:.6f}" if accuracy != "" else "",
                             "", "", f"{row['ssim']:.6f}", f"{seconds:.3f}"])
            if cfg.checkpoint_interval and rnd % cfg.checkpoint_interval == 0:
                ckpt = os.path.join(run_dir, "checkpoints", f"round_{rnd}.ckpt")
                save_checkpoint(ckpt, global_model, meta={"round": rnd,
                                                          "run": cfg.name})
                _emit_reconstructions(run_dir, clients,
                                      global_model.export_state(), rnd)

    final_path = os.path.join(run_dir, "checkpoints",
                              f"round_{cfg.agg.rounds}.ckpt")
    save_checkpoint(final_path, global_model,
                    meta={"round": cfg.agg.rounds, "run": cfg.name})
    _emit_reconstructions(run_dir, clients, global_model.export_state(),
                          cfg.agg.rounds)

    final_acc = evaluate_accuracy(global_model, dataset.test_images,
                                  dataset.test_labels)
    key_paths = []
    client_ssim = {}
    base = global_model.export_state()
    for client in clients:
        if cfg.watermark_enabled:
            # re-center the client's watermark BN statistics on the final
            # aggregated parameters before the key snapshot is taken
            client.model.load_state(base)
            refresh_watermark_stats(client, delta=train_cfg.delta)
            client_ssim[client.client_id] = watermark_ssim(client)
        key_path = os.path.join(run_dir, "keys", f"client_{client.client_id}.key")
        keysmod.save_key(client, key_path, arch, creation_round=cfg.agg.rounds)
        key_paths.append(key_path)
    return RunResult(run_dir=run_dir, checkpoint_path=final_path,
                     key_paths=key_paths, history=history,
                     final_accuracy=final_acc, client_ssim=client_ssim)


def _emit_reconstructions(run_dir, clients, global_state, rnd):
    """Reconstruct each client's watermark from the aggregated model."""
    import torch

    for client in clients:
        model, tmodel = client.model, client.tmodel
        model.load_state(global_state)
        was_training, prev_mode = model.training, model.bn_mode
        model.eval()
        model.set_bn_mode("watermark")
        with torch.no_grad():
            out = tmodel.forward(client.vector.values[None, :]).clamp(0.0, 1.0)
        model.train(was_training)
        model.set_bn_mode(prev_mode)
        path = os.path.join(run_dir, "images",
                            f"round_{rnd}_client_{client.client_id}.png")
        save_watermark_png(out[0].numpy(), path)


def pairwise_vector_cosines(clients: list) -> np.ndarray:
    """Cosine-similarity matrix of the clients' extraction vectors."""
    n = len(clients)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = cosine(clients[i].vector.values,
                                           clients[j].vector.values)
    return out
