"""The channel-attention MLP-mixer network for multi-channel time series.

Data flow for one slice x of shape [channels, slice_len]:

    local encoder   conv/conv/pool/conv stack, weights shared across the
                    recording channels, producing [channels, encoded_len]
    mixer blocks    N blocks, each a channel-attention unit (mixes across
                    channels, gated by a learned per-channel weight vector)
                    followed by a time-mixing unit (mixes along time)
    classifier      mean over time, then a linear map to class logits

Every forward function accepts a single instance or a leading batch axis;
the batched path and the single path share the same graph ops.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .tensor import ShapeError, Tensor, add, reduce_mean, reshape, swap_last_axes

CHECKPOINT_MAGIC = b"CAMLP1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the reference setting."""

    channels: int = 62
    slice_len: int = 150
    kernel_size: int = 3
    base_filters: int = 4
    num_blocks: int = 4
    channel_hidden: int = 256
    time_hidden: int = 128
    num_classes: int = 3
    relu_slope: float = 0.01

    @property
    def encoded_len(self) -> int:
        return self.slice_len // self.kernel_size

    def __post_init__(self):
        for name in ("channels", "slice_len", "kernel_size", "base_filters",
                     "num_blocks", "channel_hidden", "time_hidden", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.channels < 2:
            raise ValueError(f"need at least 2 channels, got {self.channels}")
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.encoded_len < 1:
            raise ValueError(
                f"slice_len {self.slice_len} too short for kernel_size "
                f"{self.kernel_size}"
            )


class MixingUnit:
    """Two linear maps with a LeakyReLU between: in -> hidden -> in."""

    def __init__(self, in_features: int, hidden: int, slope: float,
                 rng: np.random.Generator, dtype=np.float32):
        self.inner = nn.LinearLayer(in_features, hidden, rng, dtype)
        self.outer = nn.LinearLayer(hidden, in_features, rng, dtype)
        self.slope = slope

    def named_params(self):
        return (
            [("inner." + n, p) for n, p in self.inner.named_params()]
            + [("outer." + n, p) for n, p in self.outer.named_params()]
        )


def mixing_unit_forward(mu: MixingUnit, v: Tensor) -> Tensor:
    h = nn.linear_forward(mu.inner, v)
    return nn.linear_forward(mu.outer, nn.leaky_relu(h, mu.slope))


class ChannelAttentionUnit:
    """Channel mixing gated by a learned per-channel weight vector."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        c = cfg.channels
        self.t = Tensor.from_array(
            nn.kaiming_uniform((1, c), c, rng, dtype), requires_grad=True
        )
        self.ln = nn.LayerNorm(c, dtype=dtype)
        self.mu = MixingUnit(c, cfg.channel_hidden, cfg.relu_slope, rng, dtype)

    def named_params(self):
        return (
            [("t", self.t)]
            + [("ln." + n, p) for n, p in self.ln.named_params()]
            + [("mu." + n, p) for n, p in self.mu.named_params()]
        )


def cau_forward(cau: ChannelAttentionUnit, x: Tensor) -> Tensor:
    """x + transpose(MU(t * LayerNorm(transpose(x)))) on [.., C, L] input."""
    _check_map_shape(x, cau.t.shape[1], "channel attention unit", axis=-2)
    xt = swap_last_axes(x)
    z1 = nn.layer_norm(cau.ln, xt) * cau.t
    return add(x, swap_last_axes(mixing_unit_forward(cau.mu, z1)))


class TimeMixingUnit:
    """Mixing along the encoded time axis with a pre-norm and residual."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        length = cfg.encoded_len
        self.ln = nn.LayerNorm(length, dtype=dtype)
        self.mu = MixingUnit(length, cfg.time_hidden, cfg.relu_slope, rng, dtype)

    def named_params(self):
        return (
            [("ln." + n, p) for n, p in self.ln.named_params()]
            + [("mu." + n, p) for n, p in self.mu.named_params()]
        )


def tmu_forward(tmu: TimeMixingUnit, y1: Tensor) -> Tensor:
    """y1 + MU(LayerNorm(y1)) on [.., C, L] input; shape preserved."""
    _check_map_shape(y1, tmu.ln.extent, "time mixing unit", axis=-1)
    return add(y1, mixing_unit_forward(tmu.mu, nn.layer_norm(tmu.ln, y1)))


class CamlpBlock:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cau = ChannelAttentionUnit(cfg, rng, dtype)
        self.tmu = TimeMixingUnit(cfg, rng, dtype)

    def named_params(self):
        return (
            [("cau." + n, p) for n, p in self.cau.named_params()]
            + [("tmu." + n, p) for n, p in self.tmu.named_params()]
        )


def camlp_block_forward(block: CamlpBlock, x: Tensor) -> Tensor:
    return tmu_forward(block.tmu, cau_forward(block.cau, x))


class LocalEncoder:
    """Per-channel temporal embedding: three convs with batch norm and a
    LeakyReLU each, average pooling between the second and third conv, and
    a learned width-1 collapse back to one value per recording channel.

    Recording channels are fed as a batch of single-feature sequences, so
    conv weights are shared across channels and the channel count never
    changes.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        n, k = cfg.base_filters, cfg.kernel_size
        self.cfg = cfg
        self.conv1 = nn.Conv1dLayer(1, n, k, rng, dtype)
        self.bn1 = nn.BatchNorm1d(n, dtype=dtype)
        self.conv2 = nn.Conv1dLayer(n, 2 * n, k, rng, dtype)
        self.bn2 = nn.BatchNorm1d(2 * n, dtype=dtype)
        self.conv3 = nn.Conv1dLayer(2 * n, 4 * n, k, rng, dtype)
        self.bn3 = nn.BatchNorm1d(4 * n, dtype=dtype)
        self.collapse = nn.Conv1dLayer(4 * n, 1, 1, rng, dtype)

    def named_params(self):
        out = []
        for name in ("conv1", "bn1", "conv2", "bn2", "conv3", "bn3", "collapse"):
            for n, p in getattr(self, name).named_params():
                out.append((f"{name}.{n}", p))
        return out

    def batch_norms(self):
        return [self.bn1, self.bn2, self.bn3]


def local_encoder_forward(enc: LocalEncoder, x: Tensor) -> Tensor:
    cfg = enc.cfg
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1] != cfg.channels or x.shape[2] < cfg.kernel_size:
        raise ShapeError(
            f"encoder expects [.., {cfg.channels}, >={cfg.kernel_size}] input, "
            f"got shape {x.shape}"
        )
    batch, chans, t_len = x.shape
    slope = cfg.relu_slope
    h = reshape(x, (batch * chans, 1, t_len))
    h = nn.leaky_relu(nn.batch_norm1d(enc.bn1, nn.conv1d_same(enc.conv1, h)), slope)
    h = nn.leaky_relu(nn.batch_norm1d(enc.bn2, nn.conv1d_same(enc.conv2, h)), slope)
    h = nn.avg_pool1d(h, cfg.kernel_size)
    h = nn.leaky_relu(nn.batch_norm1d(enc.bn3, nn.conv1d_same(enc.conv3, h)), slope)
    h = nn.conv1d_same(enc.collapse, h)
    out = reshape(h, (batch, chans, t_len // cfg.kernel_size))
    return reshape(out, out.shape[1:]) if single else out


def classifier_forward(head: nn.LinearLayer, y: Tensor) -> Tensor:
    """Mean over the time axis, then linear: [.., C, L] -> [.., classes]."""
    _check_map_shape(y, head.in_features, "classifier", axis=-2)
    return nn.linear_forward(head, reduce_mean(y, axis=-1))


def _check_map_shape(x: Tensor, extent: int, what: str, axis: int) -> None:
    if x.ndim not in (2, 3) or x.shape[axis] != extent:
        raise ShapeError(
            f"{what} expects extent {extent} on axis {axis} of a rank-2 or "
            f"batched rank-3 map, got shape {x.shape}"
        )


class CamlpNet:
    """Encoder, a stack of mixer blocks, and the linear classifier head."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        self.dtype = np.dtype(dtype)
        self.encoder = LocalEncoder(config, rng, dtype)
        self.blocks = [CamlpBlock(config, rng, dtype)
                       for _ in range(config.num_blocks)]
        self.head = nn.LinearLayer(config.channels, config.num_classes, rng, dtype)
        self.training = True

    def forward(self, x: Tensor) -> Tensor:
        h = local_encoder_forward(self.encoder, x)
        for block in self.blocks:
            h = camlp_block_forward(block, h)
        return classifier_forward(self.head, h)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def train(self) -> "CamlpNet":
        self.training = True
        for bn in self.encoder.batch_norms():
            bn.training = True
        return self

    def eval(self) -> "CamlpNet":
        self.training = False
        for bn in self.encoder.batch_norms():
            bn.training = False
        return self

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("encoder." + n, p) for n, p in self.encoder.named_params()]
        for i, block in enumerate(self.blocks):
            out += [(f"blocks.{i}.{n}", p) for n, p in block.named_params()]
        out += [("head." + n, p) for n, p in self.head.named_params()]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, bn in zip(("bn1", "bn2", "bn3"), self.encoder.batch_norms()):
            out.append((f"encoder.{name}.running_mean", bn.running_mean))
            out.append((f"encoder.{name}.running_var", bn.running_var))
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        parts = name.split(".")
        bn = getattr(self.encoder, parts[1])
        setattr(bn, parts[2], value)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def net_forward(net: CamlpNet, x: Tensor) -> Tensor:
    return net.forward(x)


def param_count(component) -> dict[str, int]:
    """Trainable scalar counts itemized by top-level submodule, plus total."""
    if isinstance(component, CamlpNet):
        named = component.named_parameters()
    else:
        named = component.named_params()
    counts: dict[str, int] = {}
    total = 0
    for name, p in named:
        head = name.split(".")
        group = ".".join(head[:2]) if head[0] == "blocks" else head[0]
        counts[group] = counts.get(group, 0) + p.size
        total += p.size
    counts["total"] = total
    return counts


# -- checkpoint format ----------------------------------------------------
#
# magic "CAMLP1" | u32 version | u32 json_len | config json |
# u32 entry_count | entries: u32 name_len | name | u32 rank | u32*rank
# extents | u32 item_size (4|8) | little-endian values.
# Trainable parameters and batch-norm running buffers are both stored so a
# reloaded net reproduces eval-mode inference bit-exactly.

_DTYPE_BY_SIZE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def _write_entry(buf, name: str, array: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", array.ndim))
    for d in array.shape:
        buf.write(struct.pack("<I", d))
    item = array.dtype.itemsize
    if item not in _DTYPE_BY_SIZE:
        raise ValueError(f"unsupported parameter dtype {array.dtype}")
    buf.write(struct.pack("<I", item))
    buf.write(np.ascontiguousarray(array, dtype=_DTYPE_BY_SIZE[item]).tobytes())


def _read_entry(buf) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", buf.read(4))
    name = buf.read(name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", buf.read(4))
    shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(rank))
    (item,) = struct.unpack("<I", buf.read(4))
    dtype = _DTYPE_BY_SIZE[item]
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf.read(count * item), dtype=dtype).reshape(shape)
    return name, data.astype(dtype.newbyteorder("="), copy=True)


def save_checkpoint(net: CamlpNet, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    config_json = json.dumps(asdict(net.config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(config_json)))
    buf.write(config_json)
    entries = [(n, p.data) for n, p in net.named_parameters()]
    entries += net.named_buffers()
    buf.write(struct.pack("<I", len(entries)))
    for name, array in entries:
        _write_entry(buf, name, array)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> CamlpNet:
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    magic = buf.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a model checkpoint (bad magic {magic!r})")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (json_len,) = struct.unpack("<I", buf.read(4))
    config = ModelConfig(**json.loads(buf.read(json_len).decode("utf-8")))
    (entry_count,) = struct.unpack("<I", buf.read(4))
    stored = dict(_read_entry(buf) for _ in range(entry_count))

    first = next(iter(stored.values()))
    net = CamlpNet(config, seed=0, dtype=first.dtype)
    buffer_names = {n for n, _ in net.named_buffers()}
    for name, p in net.named_parameters():
        if name not in stored:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        if stored[name].shape != p.shape:
            raise ValueError(
                f"checkpoint parameter {name!r} has shape {stored[name].shape}, "
                f"expected {p.shape}"
            )
        p.data = stored[name]
    for name in buffer_names:
        if name in stored:
            net.set_buffer(name, stored[name])
    net.eval()
    return net
