"""Three-level encoder/decoder UNet with configurable skip links.

Encoder group ``g`` (1..3) halves the resolution with a stride-2 conv block
and refines with a stride-1 conv block; each block is conv + batch norm +
ReLU. Decoder groups mirror this with nearest upsampling + conv block,
followed by a stride-1 conv block; the very last conv has neither batch norm
nor ReLU.

Skip link ``g`` carries the activation *entering* encoder group ``g`` (the
network input for ``g = 1``) into the decoder group that restores that
resolution, where it is concatenated (or added) after the upsampling block.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 6
    out_channels: int = 1
    base_width: int = 32
    width_multipliers: tuple[int, int, int] = (1, 2, 4)
    kernel_size: int = 3
    skip_links: frozenset[int] = field(default_factory=lambda: frozenset({2, 3}))
    skip_mode: str = "concat"
    scale_preset: str = "desk"
    # ablation studies only: permits fewer than two skip links
    skip_ablation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "width_multipliers", tuple(int(m) for m in self.width_multipliers))
        object.__setattr__(self, "skip_links", frozenset(int(s) for s in self.skip_links))
        self.validate()

    @property
    def widths(self) -> tuple[int, int, int]:
        return tuple(self.base_width * m for m in self.width_multipliers)

    def validate(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1 or self.base_width < 1:
            raise ConfigError("channel counts must be positive")
        if len(self.width_multipliers) != 3 or min(self.width_multipliers) < 1:
            raise ConfigError("exactly 3 positive width multipliers are required (one per encoder group)")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if not self.skip_links <= {1, 2, 3}:
            raise ConfigError(f"skip links must be encoder group indices in 1..3, got {sorted(self.skip_links)}")
        if len(self.skip_links) != 2 and not (self.skip_ablation and len(self.skip_links) < 2):
            raise ConfigError(f"the network uses exactly two skip links, got {len(self.skip_links)}")
        if self.skip_mode not in ("concat", "add"):
            raise ConfigError(f"skip_mode must be 'concat' or 'add', got {self.skip_mode!r}")
        if self.skip_mode == "add":
            for g in self.skip_links:
                if _skip_width(self, g) != _decoder_widths(self)[3 - g]:
                    raise ConfigError(f"additive skip {g} needs matching widths")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["width_multipliers"] = list(self.width_multipliers)
        d["skip_links"] = sorted(self.skip_links)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def _skip_width(cfg: UNetConfig, g: int) -> int:
    return cfg.in_channels if g == 1 else cfg.widths[g - 2]


def _decoder_widths(cfg: UNetConfig) -> tuple[int, int, int]:
    w = cfg.widths
    return (w[1], w[0], w[0])


def desk_config(in_channels: int = 6, **overrides) -> UNetConfig:
    return UNetConfig(in_channels=in_channels, **overrides)


# Reconstructed widths: only the 7.5M total is known, see README.
PAPER_BASE_WIDTH = 126


def paper_config(in_channels: int = 6) -> UNetConfig:
    return UNetConfig(in_channels=in_channels, base_width=PAPER_BASE_WIDTH, scale_preset="paper")


def layer_plan(cfg: UNetConfig) -> list[tuple[str, int, int, int, bool]]:
    """(name, in_ch, out_ch, stride, has_bn) for every conv, in forward order."""
    w = cfg.widths
    dw = _decoder_widths(cfg)
    plan = []
    c = cfg.in_channels
    for g in (1, 2, 3):
        plan.append((f"enc{g}.down", c, w[g - 1], 2, True))
        plan.append((f"enc{g}.conv", w[g - 1], w[g - 1], 1, True))
        c = w[g - 1]
    for j in (1, 2, 3):
        g = 4 - j  # encoder group whose input resolution this decoder restores
        plan.append((f"dec{j}.up", c, dw[j - 1], 1, True))
        c = dw[j - 1]
        if g in cfg.skip_links and cfg.skip_mode == "concat":
            c += _skip_width(cfg, g)
        last = j == 3
        out = cfg.out_channels if last else dw[j - 1]
        plan.append((f"dec{j}.conv", c, out, 1, not last))
        c = out
    return plan


def conv_param_count(cin: int, cout: int, kernel_size: int, bn: bool = False) -> int:
    """Weights and biases of one conv, plus scale/shift when batch-normed."""
    return kernel_size**2 * cin * cout + cout + (2 * cout if bn else 0)


def parameter_count(cfg: UNetConfig) -> int:
    """Trainable scalars: conv weights and biases plus batch-norm scale/shift."""
    return sum(conv_param_count(cin, cout, cfg.kernel_size, bn) for _, cin, cout, _, bn in layer_plan(cfg))


class Model:
    def __init__(self, cfg: UNetConfig, params: dict[str, Tensor], buffers: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.buffers = buffers
        self.bn_momentum = 0.1
        self.bn_epsilon = 1e-5

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by name."""
        out = {k: v.data.copy() for k, v in self.params.items()}
        out.update({k: v.data.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for store in (self.params, self.buffers):
            for k, t in store.items():
                if k not in state:
                    raise CheckpointFormatError(f"state is missing {k!r}")
                if state[k].shape != t.data.shape:
                    raise CheckpointFormatError(f"{k!r}: shape {state[k].shape} != {t.data.shape}")
                t.data[...] = state[k]

    def _block(self, name: str, x: Tensor, stride: int, bn: bool, mode: str) -> Tensor:
        pad = self.cfg.kernel_size // 2
        y = T.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=stride, padding=pad)
        if not bn:
            return y
        y = T.batchnorm2d(
            y,
            self.params[f"{name}.bn.scale"],
            self.params[f"{name}.bn.shift"],
            self.buffers[f"{name}.bn.running_mean"],
            self.buffers[f"{name}.bn.running_var"],
            mode=mode,
            momentum=self.bn_momentum,
            epsilon=self.bn_epsilon,
        )
        return T.relu(y)

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        cfg = self.cfg
        if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise T.ShapeError(f"expected N x {cfg.in_channels} x H x W input, got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise T.ShapeError(f"H and W must be divisible by 8, got {x.shape[2]}x{x.shape[3]}")
        skips = {}
        h = x
        for g in (1, 2, 3):
            skips[g] = h
            h = self._block(f"enc{g}.down", h, 2, True, mode)
            h = self._block(f"enc{g}.conv", h, 1, True, mode)
        for j in (1, 2, 3):
            g = 4 - j
            h = T.upsample_nearest2x(h)
            h = self._block(f"dec{j}.up", h, 1, True, mode)
            if g in cfg.skip_links:
                h = T.concat_channels(h, skips[g]) if cfg.skip_mode == "concat" else T.add(h, skips[g])
            h = self._block(f"dec{j}.conv", h, 1, j != 3, mode)
        return h

    __call__ = forward


def build_unet(cfg: UNetConfig, seed: int = 0) -> Model:
    """Instantiate parameters deterministically from ``seed``.

    Conv weights and biases are uniform in +-1/sqrt(fan_in); batch-norm
    scale starts at 1 and shift at 0.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    k = cfg.kernel_size
    params: dict[str, Tensor] = {}
    buffers: dict[str, Tensor] = {}
    for name, cin, cout, _, bn in layer_plan(cfg):
        bound = 1.0 / np.sqrt(cin * k * k)
        params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)), True, f"{name}.weight")
        params[f"{name}.bias"] = Tensor(rng.uniform(-bound, bound, cout), True, f"{name}.bias")
        if bn:
            params[f"{name}.bn.scale"] = Tensor(np.ones(cout), True, f"{name}.bn.scale")
            params[f"{name}.bn.shift"] = Tensor(np.zeros(cout), True, f"{name}.bn.shift")
            buffers[f"{name}.bn.running_mean"] = Tensor(np.zeros(cout), name=f"{name}.bn.running_mean")
            buffers[f"{name}.bn.running_var"] = Tensor(np.ones(cout), name=f"{name}.bn.running_var")
    return Model(cfg, params, buffers)


def count_instantiated(model: Model) -> int:
    return sum(p.size for p in model.params.values())


# -- checkpoint container --------------------------------------------------
#
# magic(8) | version u32 | config-json length u32 | config json |
# blob count u32 | per blob: name length u16, name, ndim u8, dims u32*ndim,
# float64 little-endian values

CKPT_MAGIC = b"DSLCKPT\x00"
CKPT_VERSION = 1


def write_blobs(fh: BinaryIO, blobs: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError("file is truncated")
    return buf


def read_blobs(fh: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
        shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    return out


def save_checkpoint(path, model: Model, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Write the model (plus optional extra named arrays) to ``path``."""
    header = {"unet": model.cfg.to_dict(), "meta": meta or {}}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = model.state()
    for k, v in (extra or {}).items():
        blobs[f"extra/{k}"] = v
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(raw)))
        fh.write(raw)
        write_blobs(fh, blobs)


def load_checkpoint(path) -> tuple[Model, dict[str, np.ndarray], dict]:
    with open(Path(path), "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", _read_exact(fh, 8))
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(_read_exact(fh, hlen))
        blobs = read_blobs(fh)
        if fh.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes after last blob")
    cfg = UNetConfig.from_dict(header["unet"])
    model = build_unet(cfg, seed=0)
    model.load_state({k: v for k, v in blobs.items() if not k.startswith("extra/")})
    extra = {k[len("extra/") :]: v for k, v in blobs.items() if k.startswith("extra/")}
    return model, extra, header.get("meta", {})


def ablate_skip(cfg: UNetConfig, group: int) -> UNetConfig:
    """Copy of ``cfg`` without the skip link into decoder level ``group``."""
    if group not in cfg.skip_links:
        raise ConfigError(f"no skip link at group {group}")
    return replace(cfg, skip_links=cfg.skip_links - {group}, skip_ablation=True)
