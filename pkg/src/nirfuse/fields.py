"""Dual-branch continuous image model.

The restored image is ``low(x) + high(x) - beta``. Both branches are a stack
of bilinearly sampled feature grids followed by a 3-layer ReLU decoder. The
low branch uses coarse grids (it cannot represent fine detail), the high
branch dense ones. ``high`` is a single-channel structure field broadcast to
RGB unless ``high_channels=3``.

Coordinates follow the pixel-centre convention: pixel ``i`` of ``N`` sits at
``-1 + 2 * (i + 0.5) / N``. Grid cells use the same convention at their own
resolution, so querying a cell centre returns that cell's features.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc

_HASH_PRIME = 2654435761


@dataclass(frozen=True)
class ModelSpec:
    height: int
    width: int
    grid_levels: int = 4
    grid_features: int = 2
    hidden: int = 128
    low_band: tuple = (1 / 16, 1 / 4)
    high_band: tuple = (1 / 4, 1 / 2)
    hashed_grids: bool = False
    hash_cells: int = 2 ** 16
    high_channels: int = 1
    beta_channels: int = 1
    dtype: str = "float32"

    @classmethod
    def from_config(cls, config, height: int, width: int, dtype: str = "float32") -> "ModelSpec":
        return cls(height=height, width=width, grid_levels=config.grid_levels,
                   grid_features=config.grid_features, hidden=config.hidden,
                   low_band=tuple(config.low_band), high_band=tuple(config.high_band),
                   hashed_grids=config.hashed_grids, hash_cells=config.hash_cells,
                   high_channels=config.high_channels, beta_channels=config.beta_channels,
                   dtype=dtype)

    def to_json(self) -> dict:
        d = asdict(self)
        d["low_band"] = list(self.low_band)
        d["high_band"] = list(self.high_band)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["low_band"] = tuple(d["low_band"])
        d["high_band"] = tuple(d["high_band"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def band_resolutions(size: int, band: tuple, levels: int) -> list:
    """Grid sizes linearly spaced over ``[band[0] * size, band[1] * size]``.

    Sizes are at least 2 and strictly increasing.
    """
    lo, hi = band[0] * size, band[1] * size
    if levels == 1:
        raw = [hi]
    else:
        raw = [lo + (hi - lo) * k / (levels - 1) for k in range(levels)]
    out = []
    for r in raw:
        n = max(2, int(round(r)))
        if out and n <= out[-1]:
            n = out[-1] + 1
        out.append(n)
    return out


def pixel_centers(n: int) -> np.ndarray:
    return -1.0 + 2.0 * (np.arange(n) + 0.5) / n


def _axis_lerp(coords: np.ndarray, n: int):
    t = (np.clip(coords, -1.0, 1.0) + 1.0) * 0.5 * n - 0.5
    t = np.clip(t, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(t).astype(np.int64), n - 2)
    return i0, t - i0


@dataclass
class QueryGrid:
    """A regular lattice of query points (rows ``ys`` by columns ``xs``)."""

    ys: np.ndarray
    xs: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self) -> tuple:
        return len(self.ys), len(self.xs)

    @classmethod
    def full(cls, height: int, width: int) -> "QueryGrid":
        return cls(pixel_centers(height), pixel_centers(width))

    @classmethod
    def window(cls, height: int, width: int, top: int, left: int, h: int, w: int) -> "QueryGrid":
        return cls(pixel_centers(height)[top:top + h], pixel_centers(width)[left:left + w])

    def lerp(self, gh: int, gw: int, hashed_cells: int | None = None):
        """Cell indices and bilinear weights, each (N, 4), for a gh x gw grid."""
        key = (gh, gw, hashed_cells)
        if key not in self._cache:
            iy, fy = _axis_lerp(self.ys, gh)
            ix, fx = _axis_lerp(self.xs, gw)
            rows = np.stack([iy, iy, iy + 1, iy + 1], axis=-1)[:, None, :]
            cols = np.stack([ix, ix + 1, ix, ix + 1], axis=-1)[None, :, :]
            rows, cols = np.broadcast_arrays(rows, cols)
            if hashed_cells is None:
                index = rows * gw + cols
            else:
                index = (cols ^ (rows * _HASH_PRIME)) % hashed_cells
            wy = np.stack([1 - fy, 1 - fy, fy, fy], axis=-1)[:, None, :]
            wx = np.stack([1 - fx, fx, 1 - fx, fx], axis=-1)[None, :, :]
            weight = wy * wx
            self._cache[key] = (index.reshape(-1, 4), weight.reshape(-1, 4))
        return self._cache[key]


class FeatureGridStack:
    """Multi-resolution learnable feature grids sampled bilinearly."""

    def __init__(self, resolutions: list, features: int, rng: np.random.Generator, dtype,
                 hashed: bool = False, hash_cells: int = 2 ** 16, prefix: str = "grid"):
        self.resolutions = [tuple(r) for r in resolutions]
        self.features = features
        self.hash_cells = hash_cells
        self.tables = []
        self.hashed = []
        for k, (gh, gw) in enumerate(self.resolutions):
            use_hash = hashed and gh * gw > hash_cells
            cells = hash_cells if use_hash else gh * gw
            values = rng.uniform(-1e-4, 1e-4, size=(cells, features)).astype(dtype)
            self.tables.append(dc.Node(values, requires_grad=True, name=f"{prefix}.{k}"))
            self.hashed.append(use_hash)

    @property
    def out_features(self) -> int:
        return len(self.resolutions) * self.features

    def sample(self, query: QueryGrid) -> dc.Node:
        parts = []
        for table, (gh, gw), use_hash in zip(self.tables, self.resolutions, self.hashed):
            index, weight = query.lerp(gh, gw, self.hash_cells if use_hash else None)
            parts.append(dc.gather_bilinear(table, index, weight))
        return dc.concat(parts, axis=-1)


def grid_sample(stack: FeatureGridStack, ys, xs) -> dc.Node:
    """Features at the lattice ``ys x xs`` of normalized coordinates, (N, L*F)."""
    return stack.sample(QueryGrid(np.atleast_1d(np.asarray(ys, float)), np.atleast_1d(np.asarray(xs, float))))


class Decoder:
    """Three fully connected layers, ReLU between them, linear output."""

    def __init__(self, fan_in: int, hidden: int, out: int, rng: np.random.Generator, dtype,
                 out_bias: float = 0.0, prefix: str = "dec"):
        sizes = [(hidden, fan_in), (hidden, hidden), (out, hidden)]
        self.weights, self.biases = [], []
        for k, (o, i) in enumerate(sizes):
            bound = np.sqrt(6.0 / i)
            w = rng.uniform(-bound, bound, size=(o, i)).astype(dtype)
            b = np.zeros(o, dtype=dtype)
            if k == len(sizes) - 1:
                b[:] = out_bias
            self.weights.append(dc.Node(w, requires_grad=True, name=f"{prefix}.{k}.weight"))
            self.biases.append(dc.Node(b, requires_grad=True, name=f"{prefix}.{k}.bias"))

    def __call__(self, x: dc.Node) -> dc.Node:
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = dc.matmul(x, dc.transpose(w)) + b
            if k < last:
                x = dc.relu(x)
        return x


@dataclass
class Branches:
    image: dc.Node
    low: dc.Node
    high: dc.Node


class FieldModel:
    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        dtype = np.dtype(spec.dtype)
        L, F = spec.grid_levels, spec.grid_features
        low_res = list(zip(band_resolutions(spec.height, spec.low_band, L),
                           band_resolutions(spec.width, spec.low_band, L)))
        high_res = list(zip(band_resolutions(spec.height, spec.high_band, L),
                            band_resolutions(spec.width, spec.high_band, L)))
        self.low_grids = FeatureGridStack(low_res, F, rng, dtype, spec.hashed_grids, spec.hash_cells, "low.grid")
        self.high_grids = FeatureGridStack(high_res, F, rng, dtype, spec.hashed_grids, spec.hash_cells, "high.grid")
        self.low_decoder = Decoder(L * F, spec.hidden, 3, rng, dtype, out_bias=0.5, prefix="low.dec")
        self.high_decoder = Decoder(L * F, spec.hidden, spec.high_channels, rng, dtype, prefix="high.dec")
        self.beta = dc.Node(np.zeros(spec.beta_channels, dtype=dtype), requires_grad=True, name="beta")
        self.log_vars = {k: dc.Node(np.zeros((), dtype=dtype), requires_grad=True, name=f"log_var.{k}")
                         for k in ("lf", "hf", "grad")}

    # -- parameters ---------------------------------------------------------
    def named_parameters(self) -> dict:
        params = {}
        for t in self.low_grids.tables + self.high_grids.tables:
            params[t.name] = t
        for dec in (self.low_decoder, self.high_decoder):
            for w, b in zip(dec.weights, dec.biases):
                params[w.name] = w
                params[b.name] = b
        params["beta"] = self.beta
        for node in self.log_vars.values():
            params[node.name] = node
        return params

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {k: p.value.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            if state[k].shape != p.value.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.value.shape}")
            p.value = np.array(state[k], dtype=p.value.dtype, copy=True)

    # -- evaluation ---------------------------------------------------------
    def eval_low(self, query: QueryGrid) -> dc.Node:
        h, w = query.shape
        return dc.reshape(self.low_decoder(self.low_grids.sample(query)), (h, w, 3))

    def eval_high(self, query: QueryGrid) -> dc.Node:
        h, w = query.shape
        return dc.reshape(self.high_decoder(self.high_grids.sample(query)), (h, w, self.spec.high_channels))

    def forward(self, query: QueryGrid) -> Branches:
        low = self.eval_low(query)
        high = self.eval_high(query)
        image = low + (high - self.beta)
        return Branches(image=image, low=low, high=high)

    def compose(self, query: QueryGrid) -> dc.Node:
        return self.forward(query).image

    def render(self, out_h: int, out_w: int) -> np.ndarray:
        """Evaluate on an ``out_h x out_w`` pixel-centre grid and clamp to [0, 1]."""
        if out_h < 1 or out_w < 1:
            raise ValueError(f"render: output size must be positive, got {out_h}x{out_w}")
        image = self.compose(QueryGrid.full(out_h, out_w)).value
        return np.clip(image, 0.0, 1.0)

    def render_branches(self, out_h: int, out_w: int) -> Branches:
        b = self.forward(QueryGrid.full(out_h, out_w))
        return Branches(image=b.image.value, low=b.low.value, high=b.high.value)


def resolution_consistency(model: FieldModel, height: int, width: int, factor: int = 2) -> float:
    """Mean abs difference between a ``factor``x render, box-downsampled, and the 1x render."""
    fine = model.render(factor * height, factor * width)
    fine = fine.reshape(height, factor, width, factor, -1).mean(axis=(1, 3))
    return float(np.mean(np.abs(fine - model.render(height, width))))


def compose(model: FieldModel, query: QueryGrid) -> dc.Node:
    return model.compose(query)


def render(model: FieldModel, out_h: int, out_w: int) -> np.ndarray:
    return model.render(out_h, out_w)


# ---------------------------------------------------------------------------
# checkpoint file
#
#   bytes 0..7    magic b"NIRFCKPT"
#   bytes 8..11   format version, uint32 little-endian
#   bytes 12..15  header length N, uint32 little-endian
#   next N bytes  UTF-8 JSON header: {"model": ModelSpec, "config_digest": sha256 hex of
#                 the canonical ModelSpec JSON, "train_config": {...} or null,
#                 "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
#   payload       raw C-order little-endian array bytes; offsets are relative to
#                 the first payload byte

MAGIC = b"NIRFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: FieldModel, path, train_config: dict | None = None) -> None:
    manifest, chunks, offset = [], [], 0
    for name, arr in model.state_dict().items():
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        manifest.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"model": model.spec.to_json(), "config_digest": model.spec.digest(),
                         "train_config": train_config, "arrays": manifest}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def read_checkpoint_header(path) -> tuple:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r} (expected {MAGIC!r}), size {len(raw)} bytes")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (expected {VERSION})")
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: header length {hlen} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    return header, raw[16 + hlen:]


def load_checkpoint(path) -> FieldModel:
    header, payload = read_checkpoint_header(path)
    try:
        spec = ModelSpec.from_json(header["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed model header ({exc})") from None
    if spec.digest() != header.get("config_digest"):
        raise CheckpointError(f"{path}: config digest mismatch "
                              f"(header {header.get('config_digest')}, computed {spec.digest()})")
    state = {}
    for entry in header["arrays"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: array {entry['name']} ends at byte {end}, "
                                  f"payload has {len(payload)} bytes")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype=np.dtype(entry["dtype"]))
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(spec.dtype)
    model = FieldModel(spec)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model
