"""Two-head residual network for friction-factor regression with a predicted sigma.

Layout (defaults in brackets)::

    image (3 x 324 x 324)
      -> stem: 7x7/2 conv [64] + BN + ReLU + 3x3/2 max-pool
      -> one basic residual block per entry of ``channel_schedule``
         [64, 128, 256, 512]; stride 2 on every block after the first
      -> global average pool -> feature vector
    point head:    Linear(features -> 1) [+ sigmoid]              -> f_hat
    interval head: dropout(features) ++ f_hat -> Linear/ReLU stack
                   [128, 128] -> Linear(-> 1) [+ sigmoid]          -> sigma_hat

Each basic block is conv3x3-BN-ReLU-conv3x3-BN plus a shortcut (identity, or
1x1 conv + BN when the shape changes), followed by ReLU.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAGIC = b"SIWN"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}

GROUPS = ("backbone", "point_head", "pi_head")


class ConfigError(ValueError):
    pass


class ModelFileError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_size: int = 324
    input_channels: int = 3
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_channels: int = 64
    stem_pool: bool = True
    channel_schedule: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    pi_hidden: list[int] = field(default_factory=lambda: [128, 128])
    dropout_p: float = 0.5
    point_sigmoid: bool = True
    pi_sigmoid: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    scale_preset: str = "full"

    def __post_init__(self):
        self.channel_schedule = [int(c) for c in self.channel_schedule]
        self.pi_hidden = [int(c) for c in self.pi_hidden]
        self.validate()

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(
            input_size=32,
            stem_channels=8,
            channel_schedule=[8, 16],
            pi_hidden=[16, 16],
            scale_preset="tiny",
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "full":
            return cls(**overrides)
        if name == "tiny":
            return cls.tiny(**overrides)
        raise ConfigError(f"unknown scale_preset {name!r} (expected 'full' or 'tiny')")

    def validate(self) -> None:
        if self.scale_preset not in ("full", "tiny"):
            raise ConfigError(f"unknown scale_preset {self.scale_preset!r}")
        if not self.channel_schedule:
            raise ConfigError("channel_schedule needs at least one residual block")
        widths = [self.input_channels, self.stem_channels, *self.channel_schedule, *self.pi_hidden]
        if any(w < 1 for w in widths):
            raise ConfigError(f"all widths must be >= 1, got {widths}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.stem_kernel < 1 or self.stem_stride < 1:
            raise ConfigError("stem kernel and stride must be >= 1")
        if self.feature_map_sizes()[-1] < 1:
            raise ConfigError(f"input_size {self.input_size} too small for this schedule")

    def feature_map_sizes(self) -> list[int]:
        """Spatial size after the stem, the pool and each residual block."""
        s = (self.input_size + 2 * (self.stem_kernel // 2) - self.stem_kernel) // self.stem_stride + 1
        sizes = [s]
        if self.stem_pool:
            s = (s + 2 - 3) // 2 + 1
            sizes.append(s)
        for i, _ in enumerate(self.channel_schedule):
            if i > 0:
                s = (s + 2 - 3) // 2 + 1
            sizes.append(s)
        return sizes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        preset = d.pop("scale_preset", "full")
        return cls.preset(preset, **d)


# ---------------------------------------------------------------- accounting


def _blocks(cfg: ModelConfig) -> Iterator[tuple[int, int, int]]:
    cin = cfg.stem_channels
    for i, cout in enumerate(cfg.channel_schedule):
        yield cin, cout, 1 if i == 0 else 2
        cin = cout


def _needs_projection(cin: int, cout: int, stride: int) -> bool:
    return stride != 1 or cin != cout


def param_count(cfg: ModelConfig) -> int:
    """Exact number of trainable parameters (BN running statistics excluded)."""
    k = cfg.stem_kernel
    n = k * k * cfg.input_channels * cfg.stem_channels + 2 * cfg.stem_channels
    for cin, cout, stride in _blocks(cfg):
        n += 9 * cin * cout + 9 * cout * cout + 4 * cout
        if _needs_projection(cin, cout, stride):
            n += cin * cout + 2 * cout
    feat = cfg.channel_schedule[-1]
    n += feat + 1
    width = feat + 1
    for h in cfg.pi_hidden:
        n += width * h + h
        width = h
    n += width + 1
    return n


def flop_estimate(cfg: ModelConfig) -> int:
    """FLOPs of one forward pass at ``cfg.input_size``.

    Convention: a multiply-accumulate is 2 FLOPs; batchnorm is 2 per element
    (scale and shift), ReLU, sigmoid, residual add and each max-pool
    comparison 1 per element, average pooling 1 per input element.
    """
    sizes = cfg.feature_map_sizes()
    k = cfg.stem_kernel
    s = sizes[0]
    c = cfg.stem_channels
    flops = 2 * k * k * cfg.input_channels * c * s * s + 3 * c * s * s
    idx = 1
    if cfg.stem_pool:
        s = sizes[1]
        flops += 8 * c * s * s
        idx = 2
    for (cin, cout, stride), s in zip(_blocks(cfg), sizes[idx:]):
        area = s * s
        flops += 2 * 9 * cin * cout * area + 3 * cout * area  # conv1 + bn + relu
        flops += 2 * 9 * cout * cout * area + 2 * cout * area  # conv2 + bn
        if _needs_projection(cin, cout, stride):
            flops += 2 * cin * cout * area + 2 * cout * area
        flops += 2 * cout * area  # residual add + relu
    feat = cfg.channel_schedule[-1]
    flops += feat * sizes[-1] ** 2
    flops += 2 * feat + 1
    width = feat + 1
    for h in cfg.pi_hidden:
        flops += 2 * width * h + 2 * h
        width = h
    flops += 2 * width + 2
    return int(flops)


# ---------------------------------------------------------------- network


class SIWNet:
    """Parameters, buffers and the forward pass of the two-head network."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype or T.default_dtype())
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.meta: dict = {"stage1_done": False, "pixel_mean": None, "pixel_std": None}
        rng = np.random.default_rng(seed)
        self._init(rng)

    # -- construction
    def _conv(self, name: str, cout: int, cin: int, k: int, rng) -> None:
        std = math.sqrt(2.0 / (cin * k * k))
        self._param(name + ".weight", rng.normal(0.0, std, (cout, cin, k, k)))

    def _bn(self, name: str, c: int) -> None:
        self._param(name + ".weight", np.ones(c))
        self._param(name + ".bias", np.zeros(c))
        self.buffers[name + ".running_mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[name + ".running_var"] = np.ones(c, dtype=self.dtype)

    def _fc(self, name: str, cout: int, cin: int, rng) -> None:
        bound = 1.0 / math.sqrt(cin)
        self._param(name + ".weight", rng.uniform(-bound, bound, (cout, cin)))
        self._param(name + ".bias", rng.uniform(-bound, bound, (cout,)))

    def _param(self, name: str, value) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def _init(self, rng) -> None:
        cfg = self.config
        self._conv("backbone.stem.conv", cfg.stem_channels, cfg.input_channels, cfg.stem_kernel, rng)
        self._bn("backbone.stem.bn", cfg.stem_channels)
        for i, (cin, cout, stride) in enumerate(_blocks(cfg)):
            p = f"backbone.block{i}"
            self._conv(p + ".conv1", cout, cin, 3, rng)
            self._bn(p + ".bn1", cout)
            self._conv(p + ".conv2", cout, cout, 3, rng)
            self._bn(p + ".bn2", cout)
            if _needs_projection(cin, cout, stride):
                self._conv(p + ".shortcut.conv", cout, cin, 1, rng)
                self._bn(p + ".shortcut.bn", cout)
        feat = cfg.channel_schedule[-1]
        self._fc("point_head", 1, feat, rng)
        width = feat + 1
        for j, h in enumerate(cfg.pi_hidden):
            self._fc(f"pi_head.fc{j}", h, width, rng)
            width = h
        self._fc("pi_head.out", 1, width, rng)

    # -- parameter access
    def parameters(self, groups=GROUPS) -> list[Tensor]:
        groups = (groups,) if isinstance(groups, str) else tuple(groups)
        return [t for n, t in sorted(self.params.items()) if n.split(".", 1)[0] in groups]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {n: t.data for n, t in self.params.items()}
        out.update(self.buffers)
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def group_digest(self, groups=GROUPS, include_buffers: bool = True) -> str:
        """SHA-256 over the raw bytes of every array in ``groups`` (sorted names)."""
        groups = (groups,) if isinstance(groups, str) else tuple(groups)
        h = hashlib.sha256()
        for name, arr in sorted(self.named_arrays().items()):
            if name.split(".", 1)[0] not in groups:
                continue
            if not include_buffers and name in self.buffers:
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def copy(self, dtype=None) -> "SIWNet":
        m = SIWNet.__new__(SIWNet)
        m.config = replace(self.config)
        m.dtype = np.dtype(dtype or self.dtype)
        m.params = {
            n: Tensor(t.data.astype(m.dtype, copy=True), requires_grad=True, name=n) for n, t in self.params.items()
        }
        m.buffers = {n: b.astype(m.dtype, copy=True) for n, b in self.buffers.items()}
        m.meta = json.loads(json.dumps(self.meta))
        return m

    # -- forward pieces
    def _bn_apply(self, x: Tensor, name: str, training: bool) -> Tensor:
        return T.batchnorm2d(
            x,
            self.params[name + ".weight"],
            self.params[name + ".bias"],
            self.buffers[name + ".running_mean"],
            self.buffers[name + ".running_var"],
            training,
            self.config.bn_momentum,
            self.config.bn_eps,
        )

    def features(self, x: Tensor, training: bool = False) -> Tensor:
        """Backbone: image batch (N, C, S, S) -> feature matrix (N, F)."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.input_channels or x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ValueError(
                f"expected input of shape (N, {cfg.input_channels}, {cfg.input_size}, {cfg.input_size}), "
                f"got {x.shape}"
            )
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        p = self.params
        h = T.conv2d(x, p["backbone.stem.conv.weight"], cfg.stem_stride, cfg.stem_kernel // 2)
        h = T.relu(self._bn_apply(h, "backbone.stem.bn", training))
        if cfg.stem_pool:
            h = T.max_pool2d(h, 3, 2, 1)
        for i, (cin, cout, stride) in enumerate(_blocks(cfg)):
            b = f"backbone.block{i}"
            out = T.conv2d(h, p[b + ".conv1.weight"], stride, 1)
            out = T.relu(self._bn_apply(out, b + ".bn1", training))
            out = T.conv2d(out, p[b + ".conv2.weight"], 1, 1)
            out = self._bn_apply(out, b + ".bn2", training)
            if _needs_projection(cin, cout, stride):
                sc = T.conv2d(h, p[b + ".shortcut.conv.weight"], stride, 0)
                sc = self._bn_apply(sc, b + ".shortcut.bn", training)
            else:
                sc = h
            h = T.relu(out + sc)
        return T.global_avg_pool(h)

    def point(self, feats: Tensor) -> Tensor:
        """Point-estimate head: (N, F) -> f_hat (N,)."""
        out = T.linear(feats, self.params["point_head.weight"], self.params["point_head.bias"])
        if self.config.point_sigmoid:
            out = T.sigmoid(out)
        return out.reshape(-1)

    def interval_head(self, feats: Tensor, f_hat: Tensor, training: bool = False, rng=None) -> Tensor:
        """Prediction-interval head: features and f_hat -> sigma_hat (N,)."""
        cfg = self.config
        feats = T.dropout(feats, cfg.dropout_p, training, rng)
        h = T.concat([feats, f_hat.reshape(-1, 1)], axis=1)
        for j, _ in enumerate(cfg.pi_hidden):
            h = T.relu(T.linear(h, self.params[f"pi_head.fc{j}.weight"], self.params[f"pi_head.fc{j}.bias"]))
        out = T.linear(h, self.params["pi_head.out.weight"], self.params["pi_head.out.bias"])
        if cfg.pi_sigmoid:
            out = T.sigmoid(out)
        return out.reshape(-1)

    def forward(self, x, training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        x = T.as_tensor(x)
        feats = self.features(x, training)
        f_hat = self.point(feats)
        sigma_hat = self.interval_head(feats, f_hat, training, rng)
        return f_hat, sigma_hat

    __call__ = forward

    def predict(self, x, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode forward over a (N, C, S, S) array in batches, no recording."""
        x = np.asarray(x)
        fs, ss = [], []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                f, s = self.forward(Tensor(x[i:i + batch_size].astype(self.dtype)), training=False)
                fs.append(f.data)
                ss.append(s.data)
        if not fs:
            return np.empty(0, self.dtype), np.empty(0, self.dtype)
        return np.concatenate(fs), np.concatenate(ss)


def build(config: ModelConfig, seed: int = 0, dtype=None) -> SIWNet:
    return SIWNet(config, seed, dtype)


# ---------------------------------------------------------------- weight files
#
# magic "SIWN" | u16 version | u32 header length | header JSON (config + meta)
# | u32 array count | per array, sorted by name:
#   u16 name length | name (utf-8) | u8 dtype tag | u8 rank | u32 extents | payload (little endian)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(m: SIWNet) -> bytes:
    buf = io.BytesIO()
    header = _canonical_json({"config": m.config.to_dict(), "meta": m.meta})
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
    buf.write(header)
    arrays = m.named_arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.dtype.newbyteorder("<")
        tag = _DTYPE_TAGS[le]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(le, copy=False).tobytes())
    return buf.getvalue()


def save(m: SIWNet, path) -> None:
    Path(path).write_bytes(to_bytes(m))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFileError(f"truncated model file while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data: bytes) -> SIWNet:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise ModelFileError("bad magic: not a SIWN model file")
    version, hlen = r.unpack("<HI", "version")
    if version != FORMAT_VERSION:
        raise ModelFileError(f"unsupported format version {version}")
    try:
        header = json.loads(r.take(hlen, "config header").decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise ModelFileError(f"bad config header: {e}") from None
    (count,) = r.unpack("<I", "array count")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "array name length")
        name = r.take(nlen, "array name").decode("utf-8")
        tag, rank = r.unpack("<BB", f"dtype of {name}")
        if tag not in _TAG_DTYPES:
            raise ModelFileError(f"unknown dtype tag {tag} for array {name}")
        dt = _TAG_DTYPES[tag]
        shape = r.unpack(f"<{rank}I", f"shape of {name}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(nbytes, f"payload of {name}"), dtype=dt).reshape(shape).copy()
    if r.pos != len(data):
        raise ModelFileError(f"{len(data) - r.pos} trailing bytes after last array")
    dtypes = {a.dtype for a in arrays.values()}
    m = SIWNet(config, seed=0, dtype=dtypes.pop() if len(dtypes) == 1 else None)
    expected = m.named_arrays()
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise ModelFileError(f"array names do not match config: missing {missing}, unexpected {extra}")
    for name, arr in arrays.items():
        if arr.shape != expected[name].shape:
            raise ModelFileError(f"shape mismatch for {name}: file {arr.shape}, config {expected[name].shape}")
        if name in m.params:
            m.params[name].data = arr.astype(m.dtype)
        else:
            m.buffers[name] = arr.astype(m.dtype)
    m.meta = header.get("meta", m.meta)
    return m


def load(path) -> SIWNet:
    return from_bytes(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
