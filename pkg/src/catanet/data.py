"""Image I/O, luma-domain quality metrics, bicubic degradation, and the
eight-transform self-ensemble used at test time.

Images travel as (3,h,w) float32 in [0,1]; metrics convert to BT.601
studio-swing luma and run in float64, matching the usual SR evaluation
protocol (Y channel, border crop equal to the scale factor).
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from . import network
from .ops import as_tensor, bicubic_resize


class ImageError(OSError):
    """Unreadable, non-RGB, or otherwise unusable image file."""


def load_image(path) -> np.ndarray:
    """8-bit RGB PNG -> (3,h,w) float32 in [0,1] (value = byte / 255)."""
    try:
        img = Image.open(path)
        img.load()
    except OSError as e:
        raise ImageError(f"cannot read image {path}: {e}") from e
    if img.mode != "RGB":
        raise ImageError(f"{path}: expected 8-bit RGB, got mode {img.mode!r}")
    arr = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(t, path) -> None:
    """Clamp to [0,1], quantize half-away-from-zero to bytes, write PNG."""
    t = as_tensor(t)
    if t.ndim != 3 or t.shape[0] != 3:
        raise ImageError(f"save_image wants (3,h,w), got {t.shape}")
    q = np.floor(np.clip(t, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def to_y(img) -> np.ndarray:
    """BT.601 studio-swing luma of an RGB image in [0,1] -> (1,h,w)."""
    img = as_tensor(img)
    r, g, b = img[0], img[1], img[2]
    y = (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
    return y[None].astype(img.dtype, copy=False)


def _crop(y: np.ndarray, crop: int) -> np.ndarray:
    if crop == 0:
        return y
    h, w = y.shape[-2:]
    if 2 * crop >= h or 2 * crop >= w:
        raise ValueError(f"crop {crop} leaves no pixels on a {h}x{w} image")
    return y[..., crop : h - crop, crop : w - crop]


def psnr_y(a, b, crop: int = 0) -> float:
    """PSNR in dB on the luma channel, peak 1.0; +inf for identical inputs."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    ya = _crop(to_y(a), crop).astype(np.float64)
    yb = _crop(to_y(b), crop).astype(np.float64)
    mse = np.mean((ya - yb) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 1-d Gaussian tap vector (float64)."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1-d kernel on both axes."""
    from numpy.lib.stride_tricks import sliding_window_view

    t = sliding_window_view(img, len(taps), axis=0) @ taps
    return sliding_window_view(t, len(taps), axis=1) @ taps


def ssim_y(a, b, crop: int = 0) -> float:
    """Mean local SSIM on luma: 11x11 Gaussian window (sigma 1.5), K1=0.01,
    K2=0.03, dynamic range 1, averaged over positions where the window fits."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    ya = _crop(to_y(a), crop)[0].astype(np.float64)
    yb = _crop(to_y(b), crop)[0].astype(np.float64)
    if min(ya.shape) < 11:
        raise ValueError(f"image {ya.shape} smaller than the 11x11 SSIM window")
    taps = gaussian_window()
    mu_a = _filter_valid(ya, taps)
    mu_b = _filter_valid(yb, taps)
    var_a = _filter_valid(ya * ya, taps) - mu_a * mu_a
    var_b = _filter_valid(yb * yb, taps) - mu_b * mu_b
    cov = _filter_valid(ya * yb, taps) - mu_a * mu_b
    c1, c2 = 0.01**2, 0.03**2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def degrade_bicubic(hr, scale: int) -> np.ndarray:
    """Antialiased bicubic downscale by 1/scale (crops to divisible dims first)."""
    hr = as_tensor(hr)
    _, h, w = hr.shape
    hr = hr[:, : (h // scale) * scale, : (w // scale) * scale]
    return bicubic_resize(hr, 1.0 / scale)


def transform_image(img: np.ndarray, k: int) -> np.ndarray:
    """Dihedral transform k in [0,8): optional horizontal flip then k%4 rot90s."""
    out = img[:, :, ::-1] if k >= 4 else img
    return np.ascontiguousarray(np.rot90(out, k % 4, axes=(1, 2)))


def inverse_transform_image(img: np.ndarray, k: int) -> np.ndarray:
    """Exact inverse of transform_image."""
    out = np.rot90(img, -(k % 4), axes=(1, 2))
    if k >= 4:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def self_ensemble(model, img_lr) -> np.ndarray:
    """Average the model over the 8 dihedral transforms of the input."""
    img_lr = as_tensor(img_lr)
    acc = None
    for k in range(8):
        t = transform_image(img_lr, k)
        y = network.forward(t, model, training=False).value
        y = inverse_transform_image(y, k)
        acc = y if acc is None else acc + y
    return (acc / np.float32(8.0)).astype(np.float32)


def format_metric(x: float) -> str:
    return "inf" if np.isinf(x) else f"{x:.12f}"


def write_metrics_csv(path, rows: list[tuple[str, float, float]]) -> tuple[float, float]:
    """Write per-image PSNR/SSIM rows plus a trailing arithmetic-mean row."""
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    with open(path, "w") as f:
        f.write("image,psnr_db,ssim\n")
        for name, p, s in rows:
            f.write(f"{name},{format_metric(p)},{format_metric(s)}\n")
        f.write(f"mean,{format_metric(mean_psnr)},{format_metric(mean_ssim)}\n")
    return mean_psnr, mean_ssim
