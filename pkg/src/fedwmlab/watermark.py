"""Watermark keys and images.

Covers the client-side secret material (extraction vectors), the Gaussian
vector augmentation that labels perturbed vectors positive/negative by
cosine similarity, watermark image loading, a procedural pattern family
for self-contained runs, and the dot-code bit-string codec used for
capacity experiments.
"""

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from fedwmlab.metrics import _bits_to_array
from fedwmlab.seeding import derive_seed


class CapacityError(ValueError):
    """Payload exceeds what the image geometry can hold."""


class CalibrationError(RuntimeError):
    """Vector augmentation could not reach the requested label balance."""


@dataclass
class ExtractionVector:
    """A client's secret key vector, entries in [-1, 1]."""

    values: np.ndarray
    seed: int

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass
class AugmentedVectorSet:
    """Noise-perturbed vectors with positive/negative cosine labels."""

    vectors: np.ndarray  # (num, dim) float32
    labels: np.ndarray   # (num,) bool, True = positive
    source: ExtractionVector
    sigma: float
    delta: float


@dataclass
class WatermarkImage:
    """Designated output image, (H, W, C) float32 in [0, 1]."""

    pixels: np.ndarray
    provenance: str = ""

    @property
    def shape(self) -> tuple:
        return tuple(self.pixels.shape)


def generate_extraction_vector(seed: int, dim: int) -> ExtractionVector:
    """I.i.d. uniform [-1, 1] vector, deterministic in the seed."""
    if dim < 2:
        raise ValueError(f"extraction vector needs dim >= 2, got {dim}")
    rng = np.random.default_rng(seed)
    values = rng.uniform(-1.0, 1.0, size=dim).astype(np.float32)
    return ExtractionVector(values=values, seed=int(seed))


def label_vectors(vectors: np.ndarray, source: np.ndarray, delta: float) -> np.ndarray:
    """Cosine-threshold labels: True where cos(vector, source) >= delta."""
    vectors = np.asarray(vectors, dtype=np.float64)
    src = np.asarray(source, dtype=np.float64).ravel()
    norms = np.linalg.norm(vectors, axis=1) * np.linalg.norm(src)
    cos = np.divide(vectors @ src, norms, out=np.zeros(len(vectors)),
                    where=norms > 0)
    return cos >= delta


def augment_vectors(v: ExtractionVector, num: int, sigma: float, delta: float,
                    seed: int = None, max_batches: int = 400) -> AugmentedVectorSet:
    """Draw v + N(0, sigma^2 I) candidates until the set holds exactly
    ceil(num/2) positives and floor(num/2) negatives (cosine vs delta).

    Raises CalibrationError when the balance is unreachable within the
    batch cap, recommending a sigma adjustment.
    """
    if num < 2:
        raise ValueError("num must be >= 2")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    rng = np.random.default_rng(derive_seed(v.seed, "augment") if seed is None else seed)
    need_pos = (num + 1) // 2
    need_neg = num // 2
    pos: list[np.ndarray] = []
    neg: list[np.ndarray] = []
    batch = max(num, 64)
    for _ in range(max_batches):
        cand = v.values[None, :] + rng.normal(0.0, sigma, size=(batch, v.dim))
        labels = label_vectors(cand, v.values, delta)
        if len(pos) < need_pos:
            pos.extend(cand[labels][: need_pos - len(pos)])
        if len(neg) < need_neg:
            neg.extend(cand[~labels][: need_neg - len(neg)])
        if len(pos) >= need_pos and len(neg) >= need_neg:
            break
    else:
        short = "positives" if len(pos) < need_pos else "negatives"
        hint = "lower" if short == "positives" else "raise"
        raise CalibrationError(
            f"could not collect {need_pos}+{need_neg} balanced vectors at "
            f"sigma={sigma:g} (short on {short}); {hint} sigma or use "
            f"calibrate_sigma()")
    vectors = np.vstack([pos, neg]).astype(np.float32)
    labels = np.array([True] * need_pos + [False] * need_neg)
    order = rng.permutation(num)
    return AugmentedVectorSet(vectors=vectors[order], labels=labels[order],
                              source=v, sigma=float(sigma), delta=float(delta))


def calibrate_sigma(v: ExtractionVector, delta: float, seed: int = None,
                    target=(0.3, 0.7), draws: int = 2000) -> float:
    """Bisect sigma until the pre-balance positive fraction lands in target.

    The positive fraction is monotone decreasing in sigma, so plain
    bisection against the midpoint of the target band converges.
    """
    rng = np.random.default_rng(derive_seed(v.seed, "calibrate") if seed is None else seed)
    noise = rng.standard_normal(size=(draws, v.dim))

    def positive_fraction(sigma: float) -> float:
        return float(np.mean(label_vectors(v.values[None, :] + sigma * noise,
                                           v.values, delta)))

    lo, hi = 1e-4, 10.0 * float(np.linalg.norm(v.values))
    if positive_fraction(hi) > target[1]:
        return hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        frac = positive_fraction(mid)
        if target[0] <= frac <= target[1]:
            return mid
        if frac > 0.5:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"sigma calibration did not converge for delta={delta:g} at dim={v.dim}")


# -- dot-code codec ---------------------------------------------------------


def _patch_size(h: int, w: int, patches_needed: int) -> int:
    for p in range(min(h, w), 0, -1):
        if (h // p) * (w // p) >= patches_needed:
            return p
    raise CapacityError(f"cannot place {patches_needed} patches on {h}x{w}")


def dotcode_encode(bits, height: int, width: int, channels: int) -> WatermarkImage:
    """Encode a bit string as a patch-grid image, one bit per patch channel."""
    arr = _bits_to_array(bits)
    capacity = height * width * channels
    if len(arr) > capacity:
        raise CapacityError(
            f"{len(arr)} bits exceed capacity H*W*C = {height}*{width}*"
            f"{channels} = {capacity}")
    patches_needed = math.ceil(len(arr) / channels) if len(arr) else 0
    pixels = np.zeros((height, width, channels), dtype=np.float32)
    if patches_needed:
        p = _patch_size(height, width, patches_needed)
        grid_w = width // p
        for idx in range(patches_needed):
            row, col = divmod(idx, grid_w)
            chunk = arr[idx * channels:(idx + 1) * channels]
            for ch, bit in enumerate(chunk):
                pixels[row * p:(row + 1) * p, col * p:(col + 1) * p, ch] = float(bit)
    return WatermarkImage(pixels=pixels, provenance=f"dotcode:{len(arr)}bits")


def dotcode_decode(img, nbits: int) -> str:
    """Decode nbits from a patch-grid image; patch mean > 0.5 reads as 1."""
    pixels = img.pixels if isinstance(img, WatermarkImage) else np.asarray(img)
    height, width, channels = pixels.shape
    if nbits > height * width * channels:
        raise CapacityError(
            f"{nbits} bits exceed capacity of a {height}x{width}x{channels} image")
    if nbits == 0:
        return ""
    patches_needed = math.ceil(nbits / channels)
    p = _patch_size(height, width, patches_needed)
    grid_w = width // p
    out = []
    for idx in range(patches_needed):
        row, col = divmod(idx, grid_w)
        patch = pixels[row * p:(row + 1) * p, col * p:(col + 1) * p, :]
        means = patch.mean(axis=(0, 1))
        for ch in range(channels):
            if len(out) == nbits:
                break
            out.append("1" if means[ch] > 0.5 else "0")
    return "".join(out)


# -- image I/O ---------------------------------------------------------------


def load_watermark(path, target: tuple) -> WatermarkImage:
    """Load a lossless image, resize bilinearly to target (H, W, C), scale
    to [0, 1], and adapt channels (luminance conversion for C=1)."""
    height, width, channels = target
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ValueError(f"cannot read watermark image {path}: {exc}") from exc
    if img.width == 0 or img.height == 0:
        raise ValueError(f"zero-area watermark image: {path}")
    img = img.convert("L" if channels == 1 else "RGB")
    if (img.height, img.width) != (height, width):
        img = img.resize((width, height), Image.Resampling.BILINEAR)
    pixels = np.asarray(img, dtype=np.float32) / 255.0
    if channels == 1:
        pixels = pixels[:, :, None]
    return WatermarkImage(pixels=pixels, provenance=str(path))


def save_watermark_png(pixels: np.ndarray, path) -> np.ndarray:
    """Write (H, W, C) pixels in [0, 1] as an 8-bit PNG; returns the
    quantized pixels actually emitted."""
    arr = np.clip(np.asarray(pixels, dtype=np.float32), 0.0, 1.0)
    quantized = np.round(arr * 255.0).astype(np.uint8)
    if quantized.shape[2] == 1:
        Image.fromarray(quantized[:, :, 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(quantized, mode="RGB").save(path, format="PNG")
    return quantized.astype(np.float32) / 255.0


# -- procedural watermark patterns -------------------------------------------


def pattern_image(index: int, shape: tuple) -> WatermarkImage:
    """Deterministic human-recognizable glyph (disk, stripes, ring, ...).

    Distinct indices give visually distinct patterns, so multi-client runs
    need no external image files. The family favors thick, low-frequency
    structure: fine strokes are not faithfully representable through the
    pooled layers of small transposed models.
    """
    height, width, channels = shape
    ys = np.linspace(-1.0, 1.0, height)[:, None]
    xs = np.linspace(-1.0, 1.0, width)[None, :]
    yy = np.broadcast_to(ys, (height, width))
    xx = np.broadcast_to(xs, (height, width))
    r = np.sqrt(xx * xx + yy * yy)
    m = np.maximum(np.abs(xx), np.abs(yy))
    i = index % 10
    if i == 0:
        mask = (m > 0.4) & (m < 0.8)  # square ring
    elif i == 1:
        mask = np.sin(yy * 3.0 * np.pi) > 0  # horizontal stripes
    elif i == 2:
        mask = np.sin(xx * 3.0 * np.pi) > 0  # vertical stripes
    elif i == 3:
        mask = np.sin((xx + yy) * 2.0 * np.pi) > 0  # diagonal stripes
    elif i == 4:
        mask = (np.sin(xx * 2.0 * np.pi) * np.sin(yy * 2.0 * np.pi)) > 0  # checker
    elif i == 5:
        mask = m > 0.65  # frame
    elif i == 6:
        mask = r < 0.7  # disk
    elif i == 7:
        mask = np.sin((xx - yy) * 2.0 * np.pi) > 0  # anti-diagonal stripes
    elif i == 8:
        mask = ((r > 0.45) & (r < 0.85)) | (r < 0.22)  # ring with center dot
    else:
        mask = (np.abs(xx) < 0.3) | (np.abs(yy) < 0.3)  # thick plus
    pixels = np.repeat(mask.astype(np.float32)[:, :, None], channels, axis=2)
    return WatermarkImage(pixels=pixels, provenance=f"pattern:{index}")
