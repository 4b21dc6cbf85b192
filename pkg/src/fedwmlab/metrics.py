"""Image and vector metrics: SSIM, MSE, PSNR, BER, cosine similarity, ASR.

SSIM is implemented in torch so it stays differentiable inside the
watermark training loss; the other metrics are plain reductions. Public
image tensors are channels-last, (H, W, C) or (N, H, W, C).
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class SsimConfig:
    """Windowed-SSIM settings; constants default to (0.01 L)^2, (0.03 L)^2."""

    window_size: int = 7
    window: str = "uniform"  # "uniform" | "gaussian"
    sigma: float = 1.5
    data_range: float = 1.0
    c1: float = None
    c2: float = None

    def __post_init__(self):
        if self.c1 is None:
            self.c1 = (0.01 * self.data_range) ** 2
        if self.c2 is None:
            self.c2 = (0.03 * self.data_range) ** 2
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError("window_size must be odd and >= 3")
        if self.window not in ("uniform", "gaussian"):
            raise ValueError(f"unknown window kind {self.window!r}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM constants must be positive")


GAUSSIAN_11 = SsimConfig(window_size=11, window="gaussian", sigma=1.5)


def _as_nchw(x, dtype=None):
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.to(torch.float32)
    if dtype is not None:
        t = t.to(dtype)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4:
        raise ValueError(f"expected (H, W, C) or (N, H, W, C) image, got {tuple(x.shape)}")
    return t.permute(0, 3, 1, 2)


def _window_kernel(cfg: SsimConfig, channels: int, dtype) -> torch.Tensor:
    ws = cfg.window_size
    if cfg.window == "uniform":
        k2d = torch.full((ws, ws), 1.0 / (ws * ws), dtype=dtype)
    else:
        coords = torch.arange(ws, dtype=dtype) - (ws - 1) / 2.0
        g = torch.exp(-(coords ** 2) / (2.0 * cfg.sigma ** 2))
        g = g / g.sum()
        k2d = torch.outer(g, g)
    return k2d.expand(channels, 1, ws, ws).contiguous()


def ssim(a, b, cfg: SsimConfig = None, per_sample: bool = False):
    """Mean windowed SSIM between two images or image batches.

    Multi-channel inputs are averaged over channels; differentiable with
    respect to both inputs. Returns a scalar (or (N,) tensor with
    per_sample=True); a plain float when neither input is a torch tensor.
    """
    if cfg is None:
        cfg = SsimConfig()
    tensor_in = isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor)
    ta, tb = _as_nchw(a), _as_nchw(b)
    if ta.dtype != tb.dtype:
        common = torch.promote_types(ta.dtype, tb.dtype)
        ta, tb = ta.to(common), tb.to(common)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    channels = ta.shape[1]
    if cfg.window_size > min(ta.shape[2], ta.shape[3]):
        raise ValueError(
            f"window_size {cfg.window_size} exceeds image size "
            f"{ta.shape[2]}x{ta.shape[3]}")
    kernel = _window_kernel(cfg, channels, ta.dtype)

    def smooth(x):
        return F.conv2d(x, kernel, groups=channels)

    mu_a, mu_b = smooth(ta), smooth(tb)
    var_a = smooth(ta * ta) - mu_a * mu_a
    var_b = smooth(tb * tb) - mu_b * mu_b
    cov = smooth(ta * tb) - mu_a * mu_b
    c1, c2 = cfg.c1, cfg.c2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    values = ssim_map.mean(dim=(1, 2, 3))
    out = values if per_sample else values.mean()
    if tensor_in:
        return out
    return out.detach().numpy() if per_sample else float(out)


def mse(a, b):
    """Mean squared pixel difference."""
    tensor_in = isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor)
    ta, tb = torch.as_tensor(a), torch.as_tensor(b)
    if not ta.is_floating_point():
        ta = ta.to(torch.float32)
    if not tb.is_floating_point():
        tb = tb.to(torch.float32)
    common = torch.promote_types(ta.dtype, tb.dtype)
    ta, tb = ta.to(common), tb.to(common)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    out = ((ta - tb) ** 2).mean()
    return out if tensor_in else float(out)


def psnr(a, b, data_range: float = 1.0) -> float:
    """10 log10(L^2 / MSE) in dB; +inf for identical images."""
    m = float(mse(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / m)


def _bits_to_array(bits) -> np.ndarray:
    if isinstance(bits, str):
        values = [c for c in bits]
    else:
        values = list(bits)
    out = np.empty(len(values), dtype=np.uint8)
    for i, v in enumerate(values):
        if v in (0, 1, False, True):
            out[i] = int(v)
        elif v in ("0", "1"):
            out[i] = int(v)
        else:
            raise ValueError(f"invalid bit at position {i}: {v!r}")
    return out


def ber(sent, received) -> float:
    """Fraction of incorrect bits."""
    s, r = _bits_to_array(sent), _bits_to_array(received)
    if s.shape != r.shape:
        raise ValueError(f"bit-string length mismatch: {len(s)} vs {len(r)}")
    if len(s) == 0:
        raise ValueError("empty bit strings")
    return float(np.mean(s != r))


def cosine(u, v) -> float:
    """Cosine similarity of two vectors; rejects zero-norm inputs."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def asr(outcomes, tau: float) -> float:
    """Attack success rate: percentage of per-attempt SSIMs reaching tau."""
    values = np.asarray(list(outcomes), dtype=np.float64)
    if values.size == 0:
        raise ValueError("asr needs at least one attempt")
    return float(100.0 * np.count_nonzero(values >= tau) / values.size)
