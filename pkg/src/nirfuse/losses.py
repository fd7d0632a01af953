"""Supervision terms and their uncertainty-weighted sum.

Every per-subband quantity is reduced with a mean over its elements; the
outer sums over scales and subbands are kept. This keeps magnitudes (and the
learned log-variances) independent of the crop size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .wavelet import DETAIL_BANDS, WaveletPyramid

log = logging.getLogger(__name__)

YCBCR_WEIGHTS = (0.299, 0.587, 0.114)
TASKS = ("lf", "hf", "grad")


class LossError(ValueError):
    pass


@dataclass
class LossReport:
    iteration: int
    l_lf: float
    l_hf: float
    l_grad: float
    l_zero: float
    l_reg: float
    w_lf: float
    w_hf: float
    w_grad: float
    total: float

    @staticmethod
    def columns() -> list:
        return list(LossReport.__dataclass_fields__)

    def row(self) -> dict:
        return asdict(self)


def _check_conformal(a: WaveletPyramid, b: WaveletPyramid, bands, what: str):
    if a.depth != b.depth:
        raise LossError(f"{what}: pyramids have {a.depth} and {b.depth} levels")
    for s in range(1, a.depth + 1):
        for name in bands:
            sa, sb = a.band(s, name).shape, b.band(s, name).shape
            if sa != sb:
                raise LossError(f"{what}: level {s} {name} shapes differ, {sa} vs {sb}")


def charbonnier(diff: dc.Node, eps: float) -> dc.Node:
    return dc.mean(dc.sqrt(dc.square(diff) + eps * eps))


def loss_lf(pred: WaveletPyramid, target: WaveletPyramid, eps: float = 1e-3) -> dc.Node:
    """Charbonnier distance between approximation (LL) bands, summed over scales."""
    _check_conformal(pred, target, ("LL",), "loss_lf")
    terms = [charbonnier(pred.band(s, "LL") - target.band(s, "LL"), eps) for s in range(1, pred.depth + 1)]
    return _sum(terms)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(x: dc.Node, g: np.ndarray) -> dc.Node:
    return dc.correlate_valid(dc.correlate_valid(x, g, axis=0), g, axis=1)


def ssim_map(a, b, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> dc.Node:
    """Mean SSIM over the valid (unpadded) region of two (H, W[, C]) planes."""
    a = a if isinstance(a, dc.Node) else dc.constant(a)
    b = b if isinstance(b, dc.Node) else dc.constant(b)
    if a.shape != b.shape:
        raise LossError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise LossError(f"ssim: plane {a.shape[:2]} is smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _blur(a, g), _blur(b, g)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = _blur(a * a, g) - mu_aa
    var_b = _blur(b * b, g) - mu_bb
    cov = _blur(a * b, g) - mu_ab
    num = (2.0 * mu_ab + c1) * (2.0 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return dc.mean(num / den)


def loss_hf(pred: WaveletPyramid, target: WaveletPyramid, l1_weight: float = 0.5, ssim_weight: float = 0.5,
            window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> dc.Node:
    """l1 plus (1 - SSIM) between detail bands, summed over scales and orientations."""
    _check_conformal(pred, target, DETAIL_BANDS, "loss_hf")
    terms = []
    for s in range(1, pred.depth + 1):
        for name in DETAIL_BANDS:
            p, t = pred.band(s, name), target.band(s, name)
            terms.append(l1_weight * dc.mean(dc.abs_(p - t)))
            if ssim_weight == 0:
                continue
            if p.shape[0] < window or p.shape[1] < window:
                log.debug("loss_hf: skipping SSIM at level %d %s, plane %s < window %d", s, name, p.shape, window)
                continue
            terms.append(ssim_weight * (1.0 - ssim_map(p, t, window, sigma, data_range)))
    return _sum(terms)


def rgb_to_ycbcr(rgb, with_chroma: bool = False):
    """Full-range BT.601. Returns Y as (H, W, 1), plus Cb and Cr when asked."""
    rgb = rgb if isinstance(rgb, dc.Node) else dc.constant(rgb)
    if rgb.shape[-1] != 3:
        raise LossError(f"rgb_to_ycbcr: expected 3 channels, got shape {rgb.shape}")
    wy = np.asarray(YCBCR_WEIGHTS, dtype=rgb.dtype)
    y = dc.sum_(dc.affine(rgb, wy), axis=-1, keepdims=True)
    if not with_chroma:
        return y
    wcb = np.asarray((-0.168736, -0.331264, 0.5), dtype=rgb.dtype)
    wcr = np.asarray((0.5, -0.418688, -0.081312), dtype=rgb.dtype)
    cb = dc.affine(dc.sum_(dc.affine(rgb, wcb), axis=-1, keepdims=True), 1.0, 0.5)
    cr = dc.affine(dc.sum_(dc.affine(rgb, wcr), axis=-1, keepdims=True), 1.0, 0.5)
    return y, cb, cr


def _dx(p: dc.Node) -> dc.Node:
    return p[:, 1:] - p[:, :-1]


def _dy(p: dc.Node) -> dc.Node:
    return p[1:, :] - p[:-1, :]


def loss_grad(pred_rgb, nir, polarity_free: bool = False) -> dc.Node:
    """l1 distance between forward-difference gradients of predicted Y and NIR."""
    pred_rgb = pred_rgb if isinstance(pred_rgb, dc.Node) else dc.constant(pred_rgb)
    nir = nir if isinstance(nir, dc.Node) else dc.constant(nir)
    if pred_rgb.shape[0] < 2 or pred_rgb.shape[1] < 2:
        raise LossError(f"loss_grad: plane {pred_rgb.shape[:2]} needs at least 2x2 pixels")
    if pred_rgb.shape[:2] != nir.shape[:2]:
        raise LossError(f"loss_grad: shape mismatch {pred_rgb.shape} vs {nir.shape}")
    y = rgb_to_ycbcr(pred_rgb)
    terms = []
    for d in (_dx, _dy):
        gp, gn = d(y), d(nir)
        if polarity_free:
            gp, gn = dc.abs_(gp), dc.abs_(gn)
        terms.append(dc.mean(dc.abs_(gp - gn)))
    return terms[0] + terms[1]


def loss_zero(hf_plane, beta) -> dc.Node:
    """Norm of mean(high - beta); |mean(high) - beta| for a scalar beta."""
    hf_plane = hf_plane if isinstance(hf_plane, dc.Node) else dc.constant(hf_plane)
    beta = beta if isinstance(beta, dc.Node) else dc.constant(np.asarray(beta, dtype=hf_plane.dtype))
    centered = dc.mean(hf_plane, axis=(0, 1)) - beta
    if centered.value.size == 1:
        return dc.abs_(dc.reshape(centered, ()))
    # per-channel beta: Euclidean norm, floored to keep sqrt differentiable
    return dc.sqrt(dc.sum_(dc.square(centered)) + 1e-12)


def loss_reg(lf: WaveletPyramid, hf: WaveletPyramid) -> dc.Node:
    """Mean |.| of the low branch's details plus the high branch's approximation."""
    if lf.depth != hf.depth:
        raise LossError(f"loss_reg: pyramids have {lf.depth} and {hf.depth} levels")
    terms = []
    for s in range(1, lf.depth + 1):
        if lf.band(s, "LL").shape[:2] != hf.band(s, "LL").shape[:2]:
            raise LossError(f"loss_reg: level {s} sizes differ, "
                            f"{lf.band(s, 'LL').shape} vs {hf.band(s, 'LL').shape}")
        for name in DETAIL_BANDS:
            terms.append(dc.mean(dc.abs_(lf.band(s, name))))
        terms.append(dc.mean(dc.abs_(hf.band(s, "LL"))))
    return _sum(terms)


def total_loss(terms: dict, log_vars: dict | None, reg_weight: float, zero_weight: float,
               iteration: int = 0) -> tuple:
    """Uncertainty-weighted aggregate.

    ``terms`` maps ``lf``, ``hf``, ``grad``, ``reg``, ``zero`` to scalar
    nodes (a missing key means the term is disabled). ``log_vars`` holds
    ``s_k = log sigma_k^2`` per task; ``None`` means fixed unit weights.
    Task k contributes ``exp(-s_k) / 2 * L_k + s_k / 2``.
    """
    for name, node in terms.items():
        if not math.isfinite(float(node.value)):
            raise dc.NumericalError(f"loss term {name}", f"value {float(node.value)}")
    parts = []
    weights = {}
    for k in TASKS:
        if k not in terms:
            weights[k] = 0.0
            continue
        if log_vars is None:
            weights[k] = 1.0
            parts.append(terms[k])
        else:
            s = log_vars[k]
            w = 0.5 * dc.exp(-s)
            weights[k] = float(w.value)
            parts.append(w * terms[k] + 0.5 * s)
    if "reg" in terms:
        parts.append(reg_weight * terms["reg"])
    if "zero" in terms:
        parts.append(zero_weight * terms["zero"])
    total = _sum(parts) if parts else dc.constant(0.0)

    def val(k):
        return float(terms[k].value) if k in terms else 0.0

    report = LossReport(iteration=iteration, l_lf=val("lf"), l_hf=val("hf"), l_grad=val("grad"),
                        l_zero=val("zero"), l_reg=val("reg"), w_lf=weights["lf"], w_hf=weights["hf"],
                        w_grad=weights["grad"], total=float(total.value))
    return total, report


def _sum(terms: list) -> dc.Node:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
