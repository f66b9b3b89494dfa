"""The three-branch detector: spatial CNN, spectrum CNN and radial-profile MLP.

Branch outputs are concatenated and passed through a two-layer head that
ends in a sigmoid probability of the image being synthetic.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CorruptFile, InvalidConfig, ShapeMismatch, VersionUnsupported
from .neural import ops
from .neural.layers import BatchNorm2d, Conv2d, Ctx, Linear, Module
from .neural.tensor import Tensor

MODALITIES = ("spatial", "frequency", "radial")
SPATIAL_PRESETS = ("resnet18", "tiny")
SPATIAL_DIM = 512
TINY_WIDTHS = (16, 32, 64)
RESNET18_WIDTHS = (64, 128, 256, 512)


@dataclass
class FreqCrossConfig:
    spatial_preset: str = "resnet18"
    freq_channels: tuple[int, int, int] = (32, 64, 128)
    freq_out_dim: int = 512
    radial_bins: int = 30
    radial_hidden: int = 64
    radial_out_dim: int = 32
    head_hidden: int = 256
    dropout_p: float = 0.5
    modalities: tuple[str, ...] = MODALITIES
    input_side: int = 224

    def __post_init__(self):
        self.freq_channels = tuple(int(c) for c in self.freq_channels)
        self.modalities = tuple(m for m in MODALITIES if m in set(self.modalities))
        self.validate()

    def validate(self):
        if self.spatial_preset not in SPATIAL_PRESETS:
            raise InvalidConfig(f"spatial_preset must be one of {SPATIAL_PRESETS}, got {self.spatial_preset!r}")
        if len(self.freq_channels) != 3:
            raise InvalidConfig(f"freq_channels needs 3 entries, got {len(self.freq_channels)}")
        dims = {
            "freq_out_dim": self.freq_out_dim,
            "radial_bins": self.radial_bins,
            "radial_hidden": self.radial_hidden,
            "radial_out_dim": self.radial_out_dim,
            "head_hidden": self.head_hidden,
            "input_side": self.input_side,
        }
        for name, v in dims.items():
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise InvalidConfig(f"{name} must be a positive integer, got {v!r}")
        if min(self.freq_channels) < 1:
            raise InvalidConfig(f"freq_channels must be positive, got {self.freq_channels}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise InvalidConfig(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not self.modalities:
            raise InvalidConfig("at least one modality must be enabled")
        if self.input_side < 8:
            raise InvalidConfig(f"input_side must be >= 8, got {self.input_side}")

    @property
    def fused_dim(self) -> int:
        widths = {"spatial": SPATIAL_DIM, "frequency": self.freq_out_dim, "radial": self.radial_out_dim}
        return sum(widths[m] for m in self.modalities)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freq_channels"] = list(self.freq_channels)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FreqCrossConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        unknown_mods = set(d.get("modalities", ())) - set(MODALITIES)
        if unknown_mods:
            raise InvalidConfig(f"unknown modalities: {sorted(unknown_mods)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# branches


class ConvBlock(Module):
    """3x3 conv (pad 1), batchnorm, ReLU, 2x2 max pool."""

    def __init__(self, name, cin, cout, rng, dtype):
        self.conv = Conv2d(f"{name}.conv", cin, cout, 3, rng, dtype, padding=1)
        self.bn = BatchNorm2d(f"{name}.bn", cout, dtype)

    def __call__(self, x, ctx):
        return ops.maxpool2d(ops.relu(self.bn(self.conv(x, ctx), ctx)), 2, 2)


class BasicBlock(Module):
    def __init__(self, name, cin, cout, stride, rng, dtype):
        self.conv1 = Conv2d(f"{name}.conv1", cin, cout, 3, rng, dtype, stride=stride, padding=1)
        self.bn1 = BatchNorm2d(f"{name}.bn1", cout, dtype)
        self.conv2 = Conv2d(f"{name}.conv2", cout, cout, 3, rng, dtype, padding=1)
        self.bn2 = BatchNorm2d(f"{name}.bn2", cout, dtype)
        if stride != 1 or cin != cout:
            self.down_conv = Conv2d(f"{name}.downsample.conv", cin, cout, 1, rng, dtype, stride=stride)
            self.down_bn = BatchNorm2d(f"{name}.downsample.bn", cout, dtype)
        else:
            self.down_conv = self.down_bn = None

    def __call__(self, x, ctx):
        out = ops.relu(self.bn1(self.conv1(x, ctx), ctx))
        out = self.bn2(self.conv2(out, ctx), ctx)
        shortcut = self.down_bn(self.down_conv(x, ctx), ctx) if self.down_conv is not None else x
        return ops.relu(ops.add(out, shortcut))


class ResNet18(Module):
    """ResNet-18 trunk up to global average pooling (512 features)."""

    def __init__(self, name, rng, dtype):
        self.conv1 = Conv2d(f"{name}.conv1", 3, 64, 7, rng, dtype, stride=2, padding=3)
        self.bn1 = BatchNorm2d(f"{name}.bn1", 64, dtype)
        blocks = []
        cin = 64
        for s, width in enumerate(RESNET18_WIDTHS):
            for b in range(2):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(BasicBlock(f"{name}.stage{s + 1}.block{b}", cin, width, stride, rng, dtype))
                cin = width
        self.blocks = blocks

    def __call__(self, x, ctx):
        out = ops.relu(self.bn1(self.conv1(x, ctx), ctx))
        out = ops.maxpool2d(out, 3, 2, padding=1)
        for block in self.blocks:
            out = block(out, ctx)
        return ops.global_avg_pool(out)


class TinySpatial(Module):
    def __init__(self, name, rng, dtype):
        widths = (3,) + TINY_WIDTHS
        self.blocks = [ConvBlock(f"{name}.block{i}", widths[i], widths[i + 1], rng, dtype) for i in range(3)]
        self.proj = Linear(f"{name}.proj", TINY_WIDTHS[-1], SPATIAL_DIM, rng, dtype)

    def __call__(self, x, ctx):
        for block in self.blocks:
            x = block(x, ctx)
        return self.proj(ops.global_avg_pool(x), ctx)


class FrequencyCNN(Module):
    def __init__(self, name, channels, out_dim, rng, dtype):
        widths = (1,) + tuple(channels)
        self.blocks = [ConvBlock(f"{name}.block{i}", widths[i], widths[i + 1], rng, dtype) for i in range(3)]
        self.proj = Linear(f"{name}.proj", widths[-1], out_dim, rng, dtype)

    def __call__(self, x, ctx):
        for block in self.blocks:
            x = block(x, ctx)
        return self.proj(ops.global_avg_pool(x), ctx)


class RadialMLP(Module):
    def __init__(self, name, bins, hidden, out_dim, rng, dtype):
        self.fc1 = Linear(f"{name}.fc1", bins, hidden, rng, dtype)
        self.fc2 = Linear(f"{name}.fc2", hidden, out_dim, rng, dtype)

    def __call__(self, x, ctx):
        return self.fc2(ops.relu(self.fc1(x, ctx)), ctx)


class Head(Module):
    def __init__(self, name, fin, hidden, dropout_p, rng, dtype):
        self.fc1 = Linear(f"{name}.fc1", fin, hidden, rng, dtype)
        self.fc2 = Linear(f"{name}.fc2", hidden, 1, rng, dtype)
        self.dropout_p = dropout_p

    def __call__(self, x, ctx):
        h = ops.relu(self.fc1(x, ctx))
        h = ops.dropout(h, self.dropout_p, ctx.rng, ctx.training)
        return self.fc2(h, ctx)


@dataclass
class BranchOutputs:
    f_fused: Tensor
    p: Tensor
    f_s: Tensor | None = None
    f_f: Tensor | None = None
    f_r: Tensor | None = None
    logit: Tensor | None = field(default=None, repr=False)

    @property
    def probabilities(self) -> np.ndarray:
        return self.p.data.reshape(-1)


class FreqCross(Module):
    """Parameters, batchnorm state and forward pass of one configured detector."""

    def __init__(self, config: FreqCrossConfig, rng: np.random.Generator, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        # one independent stream per branch, always drawn, so a branch's
        # initial weights do not depend on which other branches are enabled
        seeds = rng.integers(0, 2**63, size=4)
        streams = [np.random.default_rng(int(s)) for s in seeds]
        self.spatial = self.frequency = self.radial = None
        if "spatial" in config.modalities:
            cls = ResNet18 if config.spatial_preset == "resnet18" else TinySpatial
            self.spatial = cls("spatial", streams[0], dtype)
        if "frequency" in config.modalities:
            self.frequency = FrequencyCNN("frequency", config.freq_channels, config.freq_out_dim, streams[1], dtype)
        if "radial" in config.modalities:
            self.radial = RadialMLP(
                "radial", config.radial_bins, config.radial_hidden, config.radial_out_dim, streams[2], dtype
            )
        self.head = Head("head", config.fused_dim, config.head_hidden, config.dropout_p, streams[3], dtype)

    # -- parameter access ------------------------------------------------

    def param_dict(self) -> dict:
        return dict(self.named_parameters())

    def decay_parameters(self):
        return [p for p in self.parameters() if p.decay]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def running_stats(self):
        for bn in self.batchnorms():
            yield f"{bn.name}.running_mean", bn.running_mean
            yield f"{bn.name}.running_var", bn.running_var

    def astype(self, dtype) -> FreqCross:
        """Cast parameters and running statistics in place."""
        self.dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for bn in self.batchnorms():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return self

    # -- forward ---------------------------------------------------------

    def _check(self, arr, shape, what):
        if arr is None:
            raise ShapeMismatch(f"{what} input is required for the enabled {what} branch")
        if tuple(arr.shape) != shape:
            raise ShapeMismatch(f"{what} input has shape {tuple(arr.shape)}, expected {shape}")

    def _tensor(self, x):
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.dtype))

    def forward(self, rgb=None, m_log=None, e=None, mode: str = "eval", rng=None) -> BranchOutputs:
        """Run the enabled branches on a batch.

        ``rgb`` is (B, 3, S, S), ``m_log`` (B, 1, S, S) and ``e`` (B, bins);
        inputs of masked branches are ignored and may be None.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        cfg = self.config
        ctx = Ctx(training=mode == "train", rng=rng)
        S = cfg.input_side
        batch = None
        for arr in (rgb, m_log, e):
            if arr is not None:
                batch = arr.shape[0]
                break
        outs = {}
        if self.spatial is not None:
            self._check(rgb, (batch, 3, S, S), "spatial")
            outs["f_s"] = self.spatial(self._tensor(rgb), ctx)
        if self.frequency is not None:
            self._check(m_log, (batch, 1, S, S), "frequency")
            outs["f_f"] = self.frequency(self._tensor(m_log), ctx)
        if self.radial is not None:
            self._check(e, (batch, cfg.radial_bins), "radial")
            outs["f_r"] = self.radial(self._tensor(e), ctx)
        parts = [outs[k] for k in ("f_s", "f_f", "f_r") if k in outs]
        fused = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)
        logit = self.head(fused, ctx)
        p = ops.sigmoid(logit)
        return BranchOutputs(f_fused=fused, p=p, logit=logit, **outs)

    __call__ = forward


def build(config: FreqCrossConfig, rng: np.random.Generator | int = 0, dtype=np.float32) -> FreqCross:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return FreqCross(config, rng, dtype)


def forward(model: FreqCross, rgb=None, m_log=None, e=None, mode="eval", rng=None) -> BranchOutputs:
    return model.forward(rgb, m_log, e, mode, rng)


# ---------------------------------------------------------------------------
# portable binary format
#
#   "FQXM" | u32 version | u32 len + JSON config | u32 n | n parameter records
#   | u32 m | m running-stat records | u32 CRC32 of everything before it
#
# record: u16 len + UTF-8 name | u8 dtype (0=f32, 1=f64) | u8 rank
#         | rank x u32 dims | raw little-endian values

MODEL_MAGIC = b"FQXM"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_record(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    code = _DTYPE_CODES[np.dtype(arr.dtype)]
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptFile(f"file truncated while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def record(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<H", "record name length")
        try:
            name = self.take(n, "record name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptFile("record name is not valid UTF-8") from exc
        code, rank = self.unpack("<BB", f"header of {name}")
        if code not in _CODE_DTYPES:
            raise CorruptFile(f"unknown dtype code {code} for {name}")
        dims = self.unpack(f"<{rank}I", f"dims of {name}")
        dt = _CODE_DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64))
        raw = self.take(count * dt.itemsize, name)
        return name, np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def check_crc(data: bytes) -> bytes:
    if len(data) < 4:
        raise CorruptFile("file too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptFile("checksum mismatch")
    return body


def model_to_bytes(model: FreqCross) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    params = list(model.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        write_record(buf, name, p.data)
    stats = list(model.running_stats())
    buf.write(struct.pack("<I", len(stats)))
    for name, arr in stats:
        write_record(buf, name, arr)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def read_model(reader: _Reader, magic: bytes = MODEL_MAGIC) -> FreqCross:
    if reader.take(4, "magic") != magic:
        raise CorruptFile(f"bad magic (expected {magic!r})")
    (version,) = reader.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"format version {version} is not supported (expected {FORMAT_VERSION})")
    return read_model_body(reader)


def read_model_body(reader: _Reader) -> FreqCross:
    (n,) = reader.unpack("<I", "config length")
    try:
        cfg = FreqCrossConfig.from_dict(json.loads(reader.take(n, "config").decode("utf-8")))
    except (ValueError, TypeError, InvalidConfig) as exc:
        raise CorruptFile(f"invalid config blob: {exc}") from exc
    (count,) = reader.unpack("<I", "parameter count")
    records = [reader.record() for _ in range(count)]
    (nstats,) = reader.unpack("<I", "running-stat count")
    stats = [reader.record() for _ in range(nstats)]
    dtype = records[0][1].dtype if records else np.float32
    model = FreqCross(cfg, np.random.default_rng(0), dtype=dtype)
    expected = model.param_dict()
    names = [r[0] for r in records]
    if sorted(names) != sorted(expected) or len(set(names)) != len(names):
        missing = sorted(set(expected) - set(names))
        extra = sorted(set(names) - set(expected))
        raise CorruptFile(f"parameter set does not match config (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, arr in records:
        p = expected[name]
        if arr.shape != p.shape:
            raise CorruptFile(f"{name}: stored shape {arr.shape} but config implies {p.shape}")
        p.data = arr.copy()
    bns = {bn.name: bn for bn in model.batchnorms()}
    seen = set()
    for name, arr in stats:
        base, _, kind = name.rpartition(".")
        bn = bns.get(base)
        if bn is None or kind not in ("running_mean", "running_var"):
            raise CorruptFile(f"unexpected running-stat record {name}")
        if arr.shape != bn.running_mean.shape:
            raise CorruptFile(f"{name}: stored shape {arr.shape}, expected {bn.running_mean.shape}")
        setattr(bn, kind, arr.copy())
        seen.add(name)
    if len(seen) != 2 * len(bns):
        raise CorruptFile("running statistics missing for some batchnorm layers")
    model.dtype = np.dtype(dtype)
    return model


def save(model: FreqCross, sink) -> None:
    data = model_to_bytes(model)
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        with open(sink, "wb") as fh:
            fh.write(data)


def _read_source(source) -> bytes:
    if hasattr(source, "read"):
        return source.read()
    try:
        with open(source, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise CorruptFile(f"cannot read {source}: {exc}") from exc


def model_from_bytes(data: bytes) -> FreqCross:
    reader = _Reader(data)
    model = read_model(reader)
    # parse before checking the CRC so truncation errors name the record
    if len(data) - reader.pos != 4:
        raise CorruptFile(f"{len(data) - reader.pos - 4} unexpected trailing bytes before checksum")
    check_crc(data)
    return model


def load(source) -> FreqCross:
    return model_from_bytes(_read_source(source))
