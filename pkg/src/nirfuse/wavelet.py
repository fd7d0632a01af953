"""Orthonormal 2-D Haar analysis on diffcore nodes.

Planes are (H, W, C). Subband names put the width filter first and the
height filter second: ``HL`` is high-pass along width and low-pass along
height (responds to vertical edges), ``LH`` is the transpose case. For a
2x2 block ``[[a, b], [c, d]]``::

    LL = ( a + b + c + d) / 2
    HL = (-a + b - c + d) / 2
    LH = (-a - b + c + d) / 2
    HH = ( a - b - c + d) / 2
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

SUBBANDS = ("LL", "LH", "HL", "HH")
DETAIL_BANDS = ("LH", "HL", "HH")

_KERNELS = {
    "LL": np.array([[1.0, 1.0], [1.0, 1.0]]) / 2,
    "HL": np.array([[-1.0, 1.0], [-1.0, 1.0]]) / 2,
    "LH": np.array([[-1.0, -1.0], [1.0, 1.0]]) / 2,
    "HH": np.array([[1.0, -1.0], [-1.0, 1.0]]) / 2,
}


class WaveletError(ValueError):
    pass


@dataclass
class WaveletPyramid:
    """Subbands of every level; ``levels[0]`` is the finest (s = 1)."""

    levels: list
    wavelet_id: str = "haar"

    @property
    def depth(self) -> int:
        return len(self.levels)

    def band(self, s: int, name: str):
        """Subband ``name`` at 1-based scale ``s``."""
        return self.levels[s - 1][name]

    def retained(self) -> list:
        """Planes that tile the input: all details plus the deepest LL."""
        planes = [lvl[b] for lvl in self.levels for b in DETAIL_BANDS]
        planes.append(self.levels[-1]["LL"])
        return planes


def _as_node(plane) -> dc.Node:
    return plane if isinstance(plane, dc.Node) else dc.constant(plane)


def dwt2_level(plane) -> dict:
    x = _as_node(plane)
    if x.ndim != 3:
        raise WaveletError(f"dwt2_level: expected an (H, W, C) plane, got shape {x.shape}")
    h, w = x.shape[:2]
    if h % 2 or w % 2:
        raise WaveletError(f"dwt2_level: plane is {h}x{w}; crop it to even dimensions first")
    return {name: dc.decimate2x2(x, _KERNELS[name]) for name in SUBBANDS}


def dwt2_multiscale(plane, levels: int) -> WaveletPyramid:
    x = _as_node(plane)
    if levels < 1:
        raise WaveletError(f"dwt2_multiscale: level count must be >= 1, got {levels}")
    h, w = x.shape[:2]
    step = 2 ** levels
    if h % step or w % step:
        raise WaveletError(
            f"dwt2_multiscale: {h}x{w} is not divisible by 2^{levels}={step}; crop the input")
    out = []
    current = x
    for _ in range(levels):
        bands = dwt2_level(current)
        out.append(bands)
        current = bands["LL"]
    return WaveletPyramid(out)


def idwt2(subbands: dict) -> dc.Node:
    """Inverse of :func:`dwt2_level` (used in tests and debugging only)."""
    nodes = {k: _as_node(subbands[k]) for k in SUBBANDS}
    shape = nodes["LL"].shape
    for k, n in nodes.items():
        if n.shape != shape:
            raise WaveletError(f"idwt2: subband {k} has shape {n.shape}, expected {shape}")
    ll, lh, hl, hh = (nodes[k].value for k in SUBBANDS)
    h, w = shape[:2]
    out = np.empty((2 * h, 2 * w) + shape[2:], dtype=ll.dtype)
    out[0::2, 0::2] = (ll - hl - lh + hh) / 2
    out[0::2, 1::2] = (ll + hl - lh - hh) / 2
    out[1::2, 0::2] = (ll - hl + lh - hh) / 2
    out[1::2, 1::2] = (ll + hl + lh + hh) / 2
    return dc.constant(out)


def idwt2_multiscale(pyramid: WaveletPyramid) -> dc.Node:
    current = pyramid.levels[-1]["LL"]
    for lvl in reversed(pyramid.levels):
        current = idwt2({"LL": current, "LH": lvl["LH"], "HL": lvl["HL"], "HH": lvl["HH"]})
    return current
