"""Style-intervention augmentation and baseline spectrogram augmentations.

The main pipeline perturbs device style while preserving content: a random
gain rescale, a shallow stack of freshly sampled non-trainable convolution
blocks, a clipped frequency-wise interpolation mask, and a final Frobenius
renormalization back to the gain-adjusted magnitude.  Kernels are sampled
once per mini-batch and shared by every sample in it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arrays import SpecGrid, frobenius_norm
from .errors import BadRange, ConfigError, GridTooSmall, ShapeMismatch
from .rng import RngStream

DEFAULT_KERNEL_SHAPES = ((1, 1), (1, 3), (3, 1))


@dataclass(frozen=True)
class GinConfig:
    g_min: float = 0.8
    g_max: float = 1.2
    alpha_min: float = 0.25
    num_blocks: int = 2
    kernel_shapes: tuple = DEFAULT_KERNEL_SHAPES
    leak_slope: float = 0.2
    frob_eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.g_min <= self.g_max:
            raise ConfigError(f"need 0 < g_min <= g_max, got ({self.g_min}, {self.g_max})")
        if not 0 < self.alpha_min <= 1:
            raise ConfigError(f"alpha_min must be in (0, 1], got {self.alpha_min}")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.frob_eps <= 0:
            raise ConfigError("frob_eps must be positive")
        if not self.kernel_shapes:
            raise ConfigError("kernel_shapes must be non-empty")


@dataclass(frozen=True)
class GinKernels:
    """One (shape, weights, bias) triple per block; fixed for a mini-batch."""

    blocks: tuple = field(default_factory=tuple)

    def fingerprint(self) -> bytes:
        parts = []
        for shape, weights, bias in self.blocks:
            parts.append(repr(shape).encode())
            parts.append(weights.tobytes())
            parts.append(np.float64(bias).tobytes())
        return b"|".join(parts)


def gain_intervene(x: SpecGrid, stream: RngStream, cfg: GinConfig) -> tuple[SpecGrid, float]:
    """Scale the whole grid by g ~ U(g_min, g_max)."""
    if cfg.g_min == cfg.g_max:
        g = cfg.g_min
    else:
        g = float(stream.uniform(cfg.g_min, cfg.g_max))
    out = g * x.values
    out.setflags(write=False)
    return SpecGrid(out), g


def sample_kernels(stream: RngStream, cfg: GinConfig) -> GinKernels:
    """Draw per-block kernel shape, U(-s, s) weights with s=sqrt(3/fan_in), and bias."""
    blocks = []
    n_shapes = len(cfg.kernel_shapes)
    for _ in range(cfg.num_blocks):
        shape = cfg.kernel_shapes[int(stream.integer(n_shapes))]
        fan_in = shape[0] * shape[1]
        s = np.sqrt(3.0 / fan_in)
        weights = stream.uniform(-s, s, size=shape)
        weights.setflags(write=False)
        bias = float(stream.uniform(-0.1, 0.1))
        blocks.append((shape, weights, bias))
    return GinKernels(tuple(blocks))


def _conv_same(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Zero-padded same-shape cross-correlation with a small odd kernel."""
    kh, kw = weights.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(values, ((ph, ph), (pw, pw)))
    f, t = values.shape
    out = np.zeros_like(values)
    for di in range(kh):
        for dj in range(kw):
            out += weights[di, dj] * padded[di : di + f, dj : dj + t]
    return out


def apply_style(x_gain: SpecGrid, kernels: GinKernels, cfg: GinConfig) -> SpecGrid:
    """Run the block stack: conv + bias per block, leaky rectification between
    blocks but not after the last one."""
    if x_gain.freq_bins < 3 or x_gain.time_frames < 3:
        raise GridTooSmall(
            f"style blocks need F, T >= 3, got {x_gain.freq_bins}x{x_gain.time_frames}"
        )
    v = x_gain.values
    last = len(kernels.blocks) - 1
    for i, (shape, weights, bias) in enumerate(kernels.blocks):
        v = _conv_same(v, weights) + bias
        if i != last:
            v = np.where(v >= 0, v, cfg.leak_slope * v)
    if isinstance(v, np.ndarray) and v.flags.writeable:
        v.setflags(write=False)
    return SpecGrid(v)


def sample_alpha(stream: RngStream, cfg: GinConfig, freq_bins: int) -> np.ndarray:
    """Per-frequency gate in [alpha_min, 1]: clip(U(0,1), alpha_min, 1)."""
    raw = stream.random(freq_bins)
    alpha = np.clip(raw, cfg.alpha_min, 1.0)
    alpha.setflags(write=False)
    return alpha


def gin_augment(
    x: SpecGrid, stream: RngStream, kernels: GinKernels, cfg: GinConfig
) -> SpecGrid:
    """Full style intervention: gain, style stack, frequency-gated mixing,
    then renormalize the Frobenius norm back to the gain-adjusted grid."""
    x_gain, _ = gain_intervene(x, stream, cfg)
    x_style = apply_style(x_gain, kernels, cfg)
    alpha = sample_alpha(stream, cfg, x.freq_bins)
    mixed = alpha[:, None] * x_gain.values + (1.0 - alpha[:, None]) * x_style.values
    norm_gain = frobenius_norm(x_gain)
    norm_mixed = float(np.sqrt(np.sum(mixed * mixed)))
    out = mixed * (norm_gain / (norm_mixed + cfg.frob_eps))
    out.setflags(write=False)
    return SpecGrid(out)


def spec_mask(x: SpecGrid, stream: RngStream, max_f: int, max_t: int) -> SpecGrid:
    """Zero one frequency band of width <= max_f and one time band <= max_t."""
    f, t = x.freq_bins, x.time_frames
    if not 0 <= max_f <= f:
        raise BadRange(f"max_f must be in [0, {f}], got {max_f}")
    if not 0 <= max_t <= t:
        raise BadRange(f"max_t must be in [0, {t}], got {max_t}")
    out = x.values.copy()
    wf = int(stream.integer(max_f + 1))
    f0 = int(stream.integer(f - wf + 1))
    out[f0 : f0 + wf, :] = 0.0
    wt = int(stream.integer(max_t + 1))
    t0 = int(stream.integer(t - wt + 1))
    out[:, t0 : t0 + wt] = 0.0
    out.setflags(write=False)
    return SpecGrid(out)


def mixup(
    x1: SpecGrid, x2: SpecGrid, y1: np.ndarray, y2: np.ndarray, lam: float
) -> tuple[SpecGrid, np.ndarray]:
    """Convex combination of two grids and their label distributions."""
    if x1.values.shape != x2.values.shape:
        raise ShapeMismatch(
            f"mixup needs equal grids, got {x1.values.shape} vs {x2.values.shape}"
        )
    if not 0.0 <= lam <= 1.0:
        raise BadRange(f"lam must be in [0, 1], got {lam}")
    grid = lam * x1.values + (1.0 - lam) * x2.values
    grid.setflags(write=False)
    label = lam * np.asarray(y1, dtype=np.float64) + (1.0 - lam) * np.asarray(
        y2, dtype=np.float64
    )
    return SpecGrid(grid), label
