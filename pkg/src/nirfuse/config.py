"""Run configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib


def _f(default, help: str, source: str = ""):
    return field(default=default, metadata={"help": help, "source": source})


@dataclass
class LossConfig:
    charbonnier_eps: float = _f(1e-3, "Charbonnier tolerance of the low-frequency loss", "published: 1e-3")
    l1_weight: float = _f(0.5, "weight of the l1 term in the high-frequency loss", "published: 0.5")
    ssim_weight: float = _f(0.5, "weight of the (1 - SSIM) term in the high-frequency loss", "published: 0.5")
    reg_weight: float = _f(0.7, "fixed weight of the spectral decoupling penalty", "synthetic sweep")
    zero_weight: float = _f(0.1, "fixed weight of the zero-mean centering penalty", "synthetic sweep")
    levels: int = _f(3, "number of Haar decomposition levels", "published: S=3")
    ssim_window: int = _f(11, "Gaussian SSIM window size")
    ssim_sigma: float = _f(1.5, "Gaussian SSIM window sigma")
    ssim_range: float = _f(1.0, "dynamic range used for the SSIM stabilizers")
    grad_polarity_free: bool = _f(False, "compare gradient magnitudes instead of signed gradients")

    def __post_init__(self):
        if self.charbonnier_eps <= 0:
            raise ValueError("charbonnier_eps must be > 0")
        if self.l1_weight < 0 or self.ssim_weight < 0:
            raise ValueError("l1_weight and ssim_weight must be >= 0")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")


@dataclass
class TrainConfig:
    iterations: int = _f(10000, "optimization steps per image pair", "published: 10000")
    crop: int = _f(256, "training crop side; must be divisible by 2^levels")
    full_frame_max_pixels: int = _f(512 * 512, "train on the whole frame when H*W is at most this")
    seed: int = _f(0, "seed for initialization and crop sampling")
    rgb_gain: float = _f(1.0, "digital gain applied to the RGB input before fitting")
    # architecture
    grid_levels: int = _f(4, "feature grid levels per branch")
    grid_features: int = _f(2, "features per grid cell")
    hidden: int = _f(128, "decoder hidden width", "published: 128")
    low_band: tuple = _f((1 / 16, 1 / 4), "low branch grid resolution band as fractions of H, W", "published: [H/16, H/4]")
    high_band: tuple = _f((1 / 4, 1 / 2), "high branch grid resolution band as fractions of H, W", "published: [H/4, H/2]")
    hashed_grids: bool = _f(False, "back grid levels above hash_cells with a hashed table")
    hash_cells: int = _f(2 ** 16, "hashed table size cap per level")
    high_channels: int = _f(1, "output channels of the high-frequency field (1 or 3)")
    beta_channels: int = _f(1, "channels of the learnable bias (1 or 3)")
    # optimizers
    muon_lr: float = _f(1e-3, "Muon learning rate for decoder weight matrices", "published: 1e-3")
    muon_momentum: float = _f(0.95, "Muon momentum")
    muon_nesterov: bool = _f(False, "use Nesterov momentum in Muon")
    ns_steps: int = _f(5, "Newton-Schulz iterations")
    grid_lr: float = _f(1e-2, "Adam learning rate for feature grids", "synthetic sweep")
    scalar_lr: float = _f(1e-3, "Adam learning rate for biases, beta and log-variances")
    adam_beta1: float = _f(0.9, "Adam first-moment decay")
    adam_beta2: float = _f(0.99, "Adam second-moment decay")
    adam_eps: float = _f(1e-8, "Adam epsilon")
    cosine_decay: bool = _f(False, "cosine learning-rate decay instead of a constant rate")
    # ablation switches
    use_beta: bool = _f(True, "learn the bias beta (off: beta fixed at 0)")
    use_zero_mean: bool = _f(True, "include the zero-mean centering penalty")
    use_grad: bool = _f(True, "include the gradient consistency loss")
    use_reg: bool = _f(True, "include the spectral decoupling penalty")
    use_uncertainty: bool = _f(True, "learn per-task uncertainty weights (off: unit weights)")
    # bookkeeping
    log_every: int = _f(1, "iterations between training-log rows")
    checkpoint_every: int = _f(0, "iterations between checkpoints (0: only at the end)")
    deterministic: bool = _f(True, "single-threaded kernels with fixed reduction order")
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.low_band = tuple(self.low_band)
        self.high_band = tuple(self.high_band)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.crop % (2 ** self.loss.levels):
            raise ValueError(f"crop {self.crop} is not divisible by 2^{self.loss.levels}")
        if self.high_channels not in (1, 3) or self.beta_channels not in (1, 3):
            raise ValueError("high_channels and beta_channels must be 1 or 3")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        loss_changes = {k: changes.pop(k) for k in list(changes) if k in LOSS_FIELDS}
        loss = dataclasses.replace(self.loss, **loss_changes) if loss_changes else self.loss
        return dataclasses.replace(self, loss=loss, **changes)

    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "loss":
                continue
            out[f.name] = getattr(self, f.name)
        for f in fields(self.loss):
            out[f.name] = getattr(self.loss, f.name)
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        unknown = set(flat) - set(TRAIN_FIELDS) - set(LOSS_FIELDS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        loss = LossConfig(**{k: v for k, v in flat.items() if k in LOSS_FIELDS})
        kw = {k: v for k, v in flat.items() if k in TRAIN_FIELDS}
        return cls(loss=loss, **kw)


TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig) if f.name != "loss"}
LOSS_FIELDS = {f.name: f for f in fields(LossConfig)}


def all_fields() -> dict:
    return {**TRAIN_FIELDS, **LOSS_FIELDS}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps(config: TrainConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in config.to_flat().items())


def loads(text: str) -> dict:
    """Parse a flat config file into a dict of known keys (values not yet merged)."""
    data = tomllib.loads(text)
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ValueError(f"config must be flat key = value pairs; found tables {nested}")
    return data


def load(path) -> TrainConfig:
    return TrainConfig.from_flat(loads(Path(path).read_text()))


def save(config: TrainConfig, path) -> None:
    Path(path).write_text(dumps(config))
