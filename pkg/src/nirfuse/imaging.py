"""PNG I/O, border cropping and the evaluation metrics."""

from __future__ import annotations

import json
import math
from pathlib import Path

import cv2
import numpy as np

from . import losses
from .wavelet import DETAIL_BANDS, dwt2_multiscale

PSNR_CAP = 99.0


class ImageError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale/RGB PNG as float64 (H, W, C) in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise ImageError(f"{path}: no such file")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageError(f"{path}: not a readable image")
    if raw.dtype == np.uint8:
        peak = 255.0
    elif raw.dtype == np.uint16:
        peak = 65535.0
    else:
        raise ImageError(f"{path}: unsupported sample type {raw.dtype} (need 8- or 16-bit)")
    if raw.ndim == 2:
        raw = raw[:, :, None]
    elif raw.shape[2] == 3:
        raw = raw[:, :, ::-1]
    elif raw.shape[2] == 4:
        raw = raw[:, :, 2::-1]
    else:
        raise ImageError(f"{path}: unsupported channel count {raw.shape[2]}")
    return np.clip(raw.astype(np.float64) / peak, 0.0, 1.0)


def quantize(plane: np.ndarray, bit_depth: int = 8, auto_clamp: bool = True) -> np.ndarray:
    if bit_depth not in (8, 16):
        raise ImageError(f"unsupported bit depth {bit_depth}")
    peak = 255 if bit_depth == 8 else 65535
    x = np.asarray(plane, dtype=np.float64)
    if auto_clamp:
        x = np.clip(x, 0.0, 1.0)
    elif x.min() < 0 or x.max() > 1:
        raise ImageError("plane has values outside [0, 1]; pass auto_clamp=True")
    # round half up
    q = np.floor(x * peak + 0.5)
    return q.astype(np.uint8 if bit_depth == 8 else np.uint16)


def save_image(plane: np.ndarray, path, bit_depth: int = 8, auto_clamp: bool = True) -> None:
    q = quantize(plane, bit_depth, auto_clamp)
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[:, :, 0]
    elif q.ndim == 3 and q.shape[2] == 3:
        q = np.ascontiguousarray(q[:, :, ::-1])
    elif q.ndim != 2:
        raise ImageError(f"cannot save plane of shape {plane.shape}")
    ok = cv2.imwrite(str(path), q, [cv2.IMWRITE_PNG_COMPRESSION, 6])
    if not ok:
        raise ImageError(f"{path}: write failed")


def crop_border(plane: np.ndarray, margin: int = 16) -> np.ndarray:
    h, w = plane.shape[:2]
    if margin < 0:
        raise ImageError(f"negative margin {margin}")
    if 2 * margin >= min(h, w):
        raise ImageError(f"image {h}x{w} is too small for a {margin}-pixel border crop")
    if margin == 0:
        return plane
    return plane[margin:h - margin, margin:w - margin]


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized cross-correlation with population standard deviations."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ImageError(f"ncc: shape mismatch {a.shape} vs {b.shape}")
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        raise ImageError("ncc: undefined for a constant input")
    return float(np.mean((a - a.mean()) / sa * ((b - b.mean()) / sb)))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ImageError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def capped(value: float) -> float:
    return min(value, PSNR_CAP)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(losses.ssim_map(a, b, window, sigma, data_range).value)


def luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] == 1:
        return rgb[..., 0]
    return rgb @ np.asarray(losses.YCBCR_WEIGHTS)


def gradient_magnitude(plane: np.ndarray) -> np.ndarray:
    """Forward-difference gradient magnitude on the valid (H-1) x (W-1) region."""
    p = np.asarray(plane, dtype=np.float64)
    if p.ndim == 3:
        p = p[..., 0]
    dx = p[:-1, 1:] - p[:-1, :-1]
    dy = p[1:, :-1] - p[:-1, :-1]
    return np.sqrt(dx * dx + dy * dy)


def structure_ncc(restored: np.ndarray, nir: np.ndarray) -> float:
    """NCC between gradient magnitudes of restored luminance and NIR."""
    return ncc(gradient_magnitude(luminance(restored)), gradient_magnitude(nir))


def _subband_energies(plane: np.ndarray, levels: int) -> tuple:
    pyr = dwt2_multiscale(np.asarray(plane, dtype=np.float64), levels)
    detail = sum(float(np.sum(pyr.band(s, k).value ** 2)) for s in range(1, levels + 1) for k in DETAIL_BANDS)
    return detail, float(np.sum(pyr.band(levels, "LL").value ** 2))


def detail_energy_fraction(plane: np.ndarray, levels: int = 3) -> float:
    """Share of the Haar pyramid energy held by the detail subbands of all levels."""
    detail, ll = _subband_energies(plane, levels)
    return detail / (detail + ll)


def ll_energy_fraction(plane: np.ndarray, levels: int = 3) -> float:
    """Share of the Haar pyramid energy held by the deepest approximation subband."""
    detail, ll = _subband_energies(plane, levels)
    return ll / (detail + ll)


def box_downsample(plane: np.ndarray, factor: int) -> np.ndarray:
    h, w = plane.shape[:2]
    if h % factor or w % factor:
        raise ImageError(f"box_downsample: {h}x{w} is not divisible by {factor}")
    return plane.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3))


def evaluate_pair(restored: np.ndarray, nir: np.ndarray, clean_gt: np.ndarray | None = None,
                  margin: int = 16) -> dict:
    """Metrics after removing a ``margin``-pixel border from every input.

    Always reports ``structure_ncc`` (GT-free). With a ground truth also
    reports ``psnr`` (capped at 99 dB), ``ssim`` and plain ``ncc`` against it.
    """
    restored = crop_border(np.asarray(restored, dtype=np.float64), margin)
    nir = crop_border(np.asarray(nir, dtype=np.float64), margin)
    if restored.shape[:2] != nir.shape[:2]:
        raise ImageError(f"evaluate_pair: restored {restored.shape} and NIR {nir.shape} differ")
    report = {"structure_ncc": structure_ncc(restored, nir)}
    if clean_gt is not None:
        gt = crop_border(np.asarray(clean_gt, dtype=np.float64), margin)
        if gt.shape != restored.shape:
            raise ImageError(f"evaluate_pair: restored {restored.shape} and GT {gt.shape} differ")
        report["psnr"] = capped(psnr(restored, gt))
        report["ssim"] = ssim(restored, gt)
        report["ncc"] = ncc(restored, gt)
    return report


def format_report(report: dict) -> str:
    width = max(len(k) for k in report)
    return "\n".join(f"{k:<{width}}  {v:.6f}" for k, v in report.items())


def report_json(report: dict, **extra) -> str:
    return json.dumps({**extra, **report}, sort_keys=True)
