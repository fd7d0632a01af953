"""Synthetic aligned RGB/NIR scenes with a low-light degradation model.

A scene is a Voronoi mosaic of flat colour regions plus one band-limited
texture field. The texture is added to the RGB luminance and, unchanged, to
the NIR image, while each region's NIR level comes from its own reflectance
table. The two modalities therefore share their fine structure but not
their coarse intensities.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 42
    height: int = 256
    width: int = 256
    regions: int = 12
    texture_amplitude: float = 0.15
    # radial frequency band of the texture, cycles per pixel; the default
    # keeps it above 1/16, i.e. inside the detail subbands of a 3-level Haar pyramid
    texture_band: tuple = (0.0625, 0.25)
    nir_remap: tuple | None = None

    def __post_init__(self):
        if self.regions < 2:
            raise ValueError("a scene needs at least 2 regions")
        if self.nir_remap is not None and len(self.nir_remap) != self.regions:
            raise ValueError(f"nir_remap has {len(self.nir_remap)} entries for {self.regions} regions")


@dataclass(frozen=True)
class DegradeSpec:
    gain: float = 0.2
    read_noise: float = 0.05
    shot_noise: float = 0.02

    def __post_init__(self):
        if not 0 < self.gain <= 1:
            raise ValueError("gain must be in (0, 1]")
        if self.read_noise < 0 or self.shot_noise < 0:
            raise ValueError("noise parameters must be >= 0")


REFERENCE_SCENE = SceneSpec(seed=42, height=256, width=256, regions=12, texture_amplitude=0.15)
REFERENCE_DEGRADE = DegradeSpec(gain=0.2, read_noise=0.05, shot_noise=0.02)

# Training overrides for the reference end-to-end fit: 2000 iterations on
# 128-pixel crops, with the 5x digital gain that undoes the degradation.
REFERENCE_FIT = dict(iterations=2000, crop=128, full_frame_max_pixels=0, rgb_gain=1.0 / REFERENCE_DEGRADE.gain)


def band_limited_noise(rng: np.random.Generator, height: int, width: int, band: tuple) -> np.ndarray:
    """Zero-mean, unit-variance noise with energy only in ``band`` (cycles/pixel)."""
    white = rng.standard_normal((height, width))
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    radius = np.sqrt(fy * fy + fx * fx)
    mask = (radius >= band[0]) & (radius <= band[1])
    field_ = np.fft.irfft2(np.fft.rfft2(white) * mask, s=(height, width))
    field_ -= field_.mean()
    return field_ / field_.std()


@dataclass
class Scene:
    clean_rgb: np.ndarray
    nir: np.ndarray
    labels: np.ndarray
    texture: np.ndarray
    colors: np.ndarray
    nir_levels: np.ndarray = field(repr=False)


def build_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    seeds = rng.uniform(0, 1, size=(spec.regions, 2)) * (h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    labels = np.argmin(d2, axis=-1)
    colors = rng.uniform(0.15, 0.85, size=(spec.regions, 3))
    if spec.nir_remap is None:
        nir_levels = rng.uniform(0.1, 0.9, size=spec.regions)
    else:
        nir_levels = np.asarray(spec.nir_remap, dtype=np.float64)
    texture = spec.texture_amplitude * band_limited_noise(rng, h, w, spec.texture_band)
    clean = np.clip(colors[labels] + texture[..., None], 0.0, 1.0)
    nir = np.clip(nir_levels[labels] + texture, 0.0, 1.0)[..., None]
    return Scene(clean_rgb=clean, nir=nir, labels=labels, texture=texture, colors=colors, nir_levels=nir_levels)


def generate_scene(spec: SceneSpec) -> tuple:
    """Clean RGB (H, W, 3) and NIR (H, W, 1), both in [0, 1]."""
    scene = build_scene(spec)
    return scene.clean_rgb, scene.nir


def degrade(clean_rgb: np.ndarray, spec: DegradeSpec, rng: np.random.Generator,
            clamp: bool = True) -> np.ndarray:
    """Scale by ``gain`` and add signal-dependent Gaussian noise, then clamp.

    Per-sample variance is ``read_noise^2 + shot_noise * gain * x`` before
    the clamp. Dark pixels lose part of that variance to the clamp at 0;
    ``clamp=False`` returns the raw samples.
    """
    x = np.asarray(clean_rgb, dtype=np.float64)
    signal = spec.gain * x
    std = np.sqrt(spec.read_noise ** 2 + spec.shot_noise * signal)
    out = signal + std * rng.standard_normal(x.shape)
    return np.clip(out, 0.0, 1.0) if clamp else out


def reference_pair(scene: SceneSpec = REFERENCE_SCENE, deg: DegradeSpec = REFERENCE_DEGRADE) -> tuple:
    """(clean_rgb, noisy_rgb, nir) for a scene; noise is seeded from the scene seed."""
    clean, nir = generate_scene(scene)
    noisy = degrade(clean, deg, np.random.default_rng([scene.seed, 1]))
    return clean, noisy, nir


def sidecar(scene: SceneSpec, deg: DegradeSpec) -> dict:
    s = asdict(scene)
    s["texture_band"] = list(scene.texture_band)
    if scene.nir_remap is not None:
        s["nir_remap"] = list(scene.nir_remap)
    return {"scene": s, "degrade": asdict(deg), "suggested_rgb_gain": 1.0 / deg.gain}
