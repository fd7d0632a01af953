"""Per-instance fitting loop."""

from __future__ import annotations

import contextlib
import csv
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import diffcore as dc
from . import losses
from .config import TrainConfig
from .fields import FieldModel, ModelSpec, QueryGrid, save_checkpoint
from .optim import DecoupledOptimizer
from .wavelet import dwt2_multiscale

log = logging.getLogger(__name__)

THREADS_ENV = "NIRFUSE_THREADS"


class FitAborted(RuntimeError):
    """Numerical failure during fitting; ``result`` holds the last good state."""

    def __init__(self, message: str, result: "FitResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class Window:
    top: int
    left: int
    height: int
    width: int

    def take(self, plane: np.ndarray) -> np.ndarray:
        return plane[self.top:self.top + self.height, self.left:self.left + self.width]


def sample_crop(rng: np.random.Generator, height: int, width: int, crop: int) -> Window:
    """Uniformly placed ``crop x crop`` window inside an ``height x width`` image."""
    if crop > min(height, width):
        raise ValueError(f"crop {crop} exceeds image {height}x{width}")
    top = int(rng.integers(0, height - crop + 1))
    left = int(rng.integers(0, width - crop + 1))
    return Window(top, left, crop, crop)


def uses_full_frame(config: TrainConfig, height: int, width: int) -> bool:
    return height * width <= config.full_frame_max_pixels


@dataclass
class FitResult:
    model: FieldModel
    log: list = field(default_factory=list)
    wall_time: float = 0.0
    iteration_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    diagnostics: dict = field(default_factory=dict)
    iterations_run: int = 0


class Trainer:
    """Holds the model, optimizer state and data of one fit."""

    def __init__(self, rgb: np.ndarray, nir: np.ndarray, config: TrainConfig, dtype: str = "float32"):
        rgb = np.asarray(rgb)
        nir = np.asarray(nir)
        if nir.ndim == 2:
            nir = nir[..., None]
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"RGB input must be (H, W, 3), got {rgb.shape}")
        if nir.shape[2] != 1:
            raise ValueError(f"NIR input must be single-channel, got {nir.shape}")
        if rgb.shape[:2] != nir.shape[:2]:
            raise ValueError(f"RGB is {rgb.shape[0]}x{rgb.shape[1]} but NIR is {nir.shape[0]}x{nir.shape[1]}")
        self.config = config
        self.height, self.width = rgb.shape[:2]
        self.full_frame = uses_full_frame(config, self.height, self.width)
        step = 2 ** config.loss.levels
        if self.full_frame:
            if self.height % step or self.width % step:
                raise ValueError(f"full-frame training needs dims divisible by {step}, "
                                 f"got {self.height}x{self.width}")
        elif config.crop > min(self.height, self.width):
            raise ValueError(f"crop {config.crop} exceeds image {self.height}x{self.width}")
        self.dtype = np.dtype(dtype)
        self.rgb = (rgb * config.rgb_gain).astype(self.dtype)
        self.nir = nir.astype(self.dtype)
        self.model = FieldModel(ModelSpec.from_config(config, self.height, self.width, dtype), seed=config.seed)
        frozen = set() if config.use_beta else {"beta"}
        if not config.use_uncertainty:
            frozen |= {f"log_var.{k}" for k in losses.TASKS}
        self.optimizer = DecoupledOptimizer(self.model, config, frozen=frozen)
        self.rng = np.random.default_rng([config.seed, 2])
        self.iteration = 0
        self._full = None

    def _batch(self):
        if self.full_frame:
            if self._full is None:
                self._full = self._prepare(Window(0, 0, self.height, self.width))
            return self._full
        return self._prepare(sample_crop(self.rng, self.height, self.width, self.config.crop))

    def _prepare(self, win: Window):
        levels = self.config.loss.levels
        rgb = dc.constant(win.take(self.rgb))
        nir = dc.constant(win.take(self.nir))
        query = QueryGrid.window(self.height, self.width, win.top, win.left, win.height, win.width)
        return query, rgb, nir, dwt2_multiscale(rgb, levels), dwt2_multiscale(nir, levels)

    def loss(self, iteration: int | None = None):
        """Forward pass on one batch; returns (total node, report)."""
        cfg, lc = self.config, self.config.loss
        query, rgb, nir, rgb_pyr, nir_pyr = self._batch()
        br = self.model.forward(query)
        low_pyr = dwt2_multiscale(br.low, lc.levels)
        high_pyr = dwt2_multiscale(br.high, lc.levels)
        terms = {
            "lf": losses.loss_lf(low_pyr, rgb_pyr, lc.charbonnier_eps),
            "hf": losses.loss_hf(high_pyr, _tile(nir_pyr, cfg.high_channels), lc.l1_weight, lc.ssim_weight,
                                 lc.ssim_window, lc.ssim_sigma, lc.ssim_range),
        }
        if cfg.use_grad:
            terms["grad"] = losses.loss_grad(br.image, nir, lc.grad_polarity_free)
        if cfg.use_reg:
            terms["reg"] = losses.loss_reg(low_pyr, high_pyr)
        if cfg.use_zero_mean:
            terms["zero"] = losses.loss_zero(br.high, self.model.beta)
        log_vars = self.model.log_vars if cfg.use_uncertainty else None
        it = self.iteration if iteration is None else iteration
        return losses.total_loss(terms, log_vars, lc.reg_weight, lc.zero_weight, iteration=it)

    def step(self) -> losses.LossReport:
        total, report = self.loss()
        self.model.zero_grad()
        dc.backward(total)
        self.optimizer.step()
        self.iteration += 1
        return report

    def diagnostics(self) -> dict:
        """Full-resolution panels: restored image, low branch, centred high branch."""
        br = self.model.render_branches(self.height, self.width)
        beta = self.model.beta.value
        centred = br.high - beta
        scale = float(np.max(np.abs(centred))) or 1.0
        return {
            "restored": np.clip(br.image, 0.0, 1.0),
            "low": np.clip(br.low, 0.0, 1.0),
            "high_centered": centred,
            "high_display": (centred / scale + 1.0) / 2.0,
            "high_display_scale": scale,
            "beta": beta.tolist(),
        }


def _tile(pyr, channels: int):
    if channels == 1:
        return pyr
    from .wavelet import WaveletPyramid
    return WaveletPyramid([{k: dc.concat([v] * channels, axis=-1) for k, v in lvl.items()} for lvl in pyr.levels])


def training_step(trainer: Trainer) -> losses.LossReport:
    return trainer.step()


def thread_limit(config: TrainConfig):
    if config.deterministic:
        return threadpool_limits(1)
    n = os.environ.get(THREADS_ENV)
    return threadpool_limits(int(n)) if n else contextlib.nullcontext()


def fit(rgb: np.ndarray, nir: np.ndarray, config: TrainConfig, checkpoint_path=None,
        dtype: str = "float32", progress=None) -> FitResult:
    """Fit the field model to one aligned RGB/NIR pair.

    ``checkpoint_path`` receives the final model and, with
    ``config.checkpoint_every``, periodic snapshots. On a NaN loss the model
    is rolled back to the last finite step, that state is checkpointed, and
    :class:`FitAborted` is raised.
    """
    with thread_limit(config):
        trainer = Trainer(rgb, nir, config, dtype=dtype)
        result = FitResult(model=trainer.model)
        log.info("fit: %dx%d, %d parameters, %s", trainer.height, trainer.width,
                 trainer.model.parameter_count(), "full frame" if trainer.full_frame else f"crop {config.crop}")
        times = []
        start = time.perf_counter()
        last_good = trainer.model.state_dict()
        with dc.nan_check(True):
            for it in range(config.iterations):
                t0 = time.perf_counter()
                try:
                    report = trainer.step()
                    _check_finite(trainer.model)
                except (dc.NumericalError, FloatingPointError) as exc:
                    trainer.model.load_state_dict(last_good)
                    result.iterations_run = it
                    result.wall_time = time.perf_counter() - start
                    result.iteration_times = np.asarray(times)
                    if checkpoint_path is not None:
                        save_checkpoint(trainer.model, checkpoint_path, config.to_flat())
                    raise FitAborted(f"numerical failure at iteration {it}: {exc}", result) from exc
                last_good = trainer.model.state_dict()
                times.append(time.perf_counter() - t0)
                if (it + 1) % config.log_every == 0:
                    result.log.append(report)
                if progress is not None:
                    progress(it, report)
                if (checkpoint_path is not None and config.checkpoint_every
                        and (it + 1) % config.checkpoint_every == 0):
                    save_checkpoint(trainer.model, checkpoint_path, config.to_flat())
        result.iterations_run = config.iterations
        result.wall_time = time.perf_counter() - start
        result.iteration_times = np.asarray(times)
        result.diagnostics = trainer.diagnostics()
        if checkpoint_path is not None:
            save_checkpoint(trainer.model, checkpoint_path, config.to_flat())
    if times:
        log.info("fit: %d iterations in %.1fs (%.1f ms/iter)", config.iterations, result.wall_time,
                 1e3 * float(np.mean(times)))
    return result


def _check_finite(model: FieldModel):
    for name, p in model.named_parameters().items():
        if not np.isfinite(p.value).all():
            raise dc.NumericalError(f"update of {name}")


def write_log(reports: list, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=losses.LossReport.columns())
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row())


def read_log(path) -> list:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [losses.LossReport(**{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()})
            for r in rows]
