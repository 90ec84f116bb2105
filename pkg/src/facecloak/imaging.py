"""Image primitives shared by every stage of the pipeline.

Images are float arrays in [0, 1] laid out as ``H x W x C`` (a 2-D ``H x W``
array is accepted wherever a single channel makes sense). Perturbations have
the same layout with values in [-1, 1].

SSIM is implemented once in torch so the same code serves the numpy API and
the differentiable perturbation loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")
        if self.window_sigma <= 0:
            raise ValueError("window_sigma must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _as_hwc(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected an HxW or HxWxC array, got shape {a.shape}")
    return a


def apply_perturbation(image, delta):
    """Add ``delta`` to ``image`` and clip the result to [0, 1].

    Works on numpy arrays or torch tensors of any (matching) shape; torch
    inputs stay differentiable.
    """
    if tuple(image.shape) != tuple(delta.shape):
        raise ValueError(f"shape mismatch: image {tuple(image.shape)} vs delta {tuple(delta.shape)}")
    if isinstance(image, torch.Tensor):
        return torch.clamp(image + delta, 0.0, 1.0)
    return np.clip(np.asarray(image) + np.asarray(delta), 0.0, 1.0)


def linf_norm(delta) -> float:
    if isinstance(delta, torch.Tensor):
        return float(delta.abs().max()) if delta.numel() else 0.0
    delta = np.asarray(delta)
    return float(np.abs(delta).max()) if delta.size else 0.0


def gaussian_kernel1d(kernel_size: int, sigma: float) -> np.ndarray:
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = kernel_size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def _ssim_window(p: SsimParams, channels: int, dtype, device) -> torch.Tensor:
    g = torch.as_tensor(gaussian_kernel1d(p.window_size, p.window_sigma), dtype=dtype, device=device)
    w = torch.outer(g, g)
    return w.expand(channels, 1, p.window_size, p.window_size).contiguous()


def ssim_torch(x: torch.Tensor, y: torch.Tensor, p: SsimParams = SsimParams()) -> torch.Tensor:
    """Per-sample SSIM for ``N x C x H x W`` batches.

    Statistics use a Gaussian window over every valid (fully inside) window
    position; the map is averaged over positions and then over channels.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() != 4:
        raise ValueError("expected N x C x H x W tensors")
    _, c, h, w = x.shape
    if h < p.window_size or w < p.window_size:
        raise ValueError(f"image {h}x{w} is smaller than the {p.window_size}x{p.window_size} SSIM window")
    win = _ssim_window(p, c, x.dtype, x.device)

    def filt(t):
        return F.conv2d(t, win, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + p.c1) / (mu_x**2 + mu_y**2 + p.c1)
    cs = (2 * sxy + p.c2) / (sxx + syy + p.c2)
    return (lum * cs).mean(dim=(-1, -2)).mean(dim=1)


def _hwc_to_batch(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[None]


def ssim(a, b, p: SsimParams = SsimParams()) -> float:
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(ssim_torch(_hwc_to_batch(a), _hwc_to_batch(b), p)[0])


def dssim(a, b, p: SsimParams = SsimParams()) -> float:
    return (1.0 - ssim(a, b, p)) / 2.0


# ---------------------------------------------------------------------------
# Blur and resize
# ---------------------------------------------------------------------------


def gaussian_blur(image, sigma: float = 1.0, kernel_size: int = 5) -> np.ndarray:
    """Separable Gaussian blur with half-sample symmetric boundaries.

    Accepts a single image (``H x W`` or ``H x W x C``) or a batch
    ``N x H x W x C``. Symmetric padding keeps the total intensity unchanged.
    """
    k = gaussian_kernel1d(kernel_size, sigma)
    a = np.asarray(image, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    if a.ndim not in (3, 4):
        raise ValueError(f"unsupported image shape {a.shape}")
    h_ax, w_ax = (a.ndim - 3, a.ndim - 2)
    r = kernel_size // 2
    if r > a.shape[h_ax] or r > a.shape[w_ax]:
        raise ValueError("kernel radius exceeds image size")
    out = a
    for ax in (h_ax, w_ax):
        pad = [(0, 0)] * out.ndim
        pad[ax] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        n = out.shape[ax]
        acc = np.zeros_like(out)
        for i, wt in enumerate(k):
            acc += wt * np.take(padded, np.arange(i, i + n), axis=ax)
        out = acc
    out = np.clip(out, 0.0, 1.0)
    return out[:, :, 0] if squeeze else out


def _axis_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(image, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resize with corner alignment (first/last pixels map onto each other)."""
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target size must be positive, got {new_h}x{new_w}")
    a = np.asarray(image, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    h, w = a.shape[:2]
    if (h, w) == (new_h, new_w):
        out = a.copy()
    else:
        r0, r1, fr = _axis_weights(h, new_h)
        c0, c1, fc = _axis_weights(w, new_w)
        fr = fr[:, None, None]
        fc = fc[None, :, None]
        top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
        bot = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
        out = np.clip(top * (1 - fr) + bot * fr, 0.0, 1.0)
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------------
# PNG io (8-bit)
# ---------------------------------------------------------------------------


def encode_8bit(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255.0).astype(np.uint8)


def decode_8bit(raw) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / 255.0


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = decode_8bit(np.array(im))
    return _as_hwc(arr)


def save_png(path, image) -> None:
    a = encode_8bit(_as_hwc(image))
    if a.shape[2] == 1:
        PILImage.fromarray(a[:, :, 0], mode="L").save(Path(path))
    else:
        PILImage.fromarray(a, mode="RGB").save(Path(path))
