"""Shape learner and U-Net segmenter built on :mod:`shapesig.autodiff`.

Both networks downsample with stride-2 convolutions; there is no pooling and
no normalization layer (training runs at batch size 1).
"""

import struct
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (Parameter, Tensor, concat_channels, conv3d,
                       conv_transpose3d, relu, sigmoid)

KERNEL = 3


@dataclass(frozen=True)
class ShapeNetConfig:
    levels: int = 4
    base_channels: int = 8

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1:
            raise ValueError("levels and base_channels must be positive")


@dataclass(frozen=True)
class SegNetConfig:
    depth: int = 3
    base_channels: int = 8

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be positive")


def _he_normal(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _conv_param(rng, name, cin, cout, k=KERNEL):
    w = Parameter(f"{name}.w", _he_normal(rng, (cout, cin, k, k, k), cin * k ** 3))
    b = Parameter(f"{name}.b", np.zeros(cout, np.float32))
    return [w, b]


def _up_param(rng, name, cin, cout):
    # k=2, stride 2: every output voxel sees exactly one input voxel per channel
    w = Parameter(f"{name}.w", _he_normal(rng, (cin, cout, 2, 2, 2), cin))
    b = Parameter(f"{name}.b", np.zeros(cout, np.float32))
    return [w, b]


def _shape_layers(cfg):
    """(name, cin, cout, stride, relu) for every conv of the shape learner."""
    layers, cin = [], 1
    for lvl in range(cfg.levels - 1):
        c = cfg.base_channels * 2 ** lvl
        layers.append((f"level{lvl}.conv", cin, c, 1, True))
        layers.append((f"level{lvl}.down", c, c, 2, True))
        cin = c
    layers.append(("signature", cin, 1, 2, False))
    return layers


def _seg_layers(cfg):
    """(kind, name, cin, cout) in construction order."""
    ch = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
    layers, cin = [], 1
    for lvl in range(cfg.depth):
        layers.append(("conv", f"enc{lvl}", cin, ch[lvl]))
        layers.append(("conv", f"down{lvl}", ch[lvl], ch[lvl + 1]))
        cin = ch[lvl + 1]
    layers.append(("conv", "bottom", ch[-1], ch[-1]))
    for lvl in reversed(range(cfg.depth)):
        layers.append(("up", f"up{lvl}", ch[lvl + 1], ch[lvl]))
        layers.append(("conv", f"dec{lvl}", 2 * ch[lvl], ch[lvl]))
    layers.append(("head", "head", ch[0], 1))
    return layers


def init_weights(config, seed):
    """He-normal convolution weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = []
    if isinstance(config, ShapeNetConfig):
        for name, cin, cout, _, _ in _shape_layers(config):
            params += _conv_param(rng, name, cin, cout)
    elif isinstance(config, SegNetConfig):
        for kind, name, cin, cout in _seg_layers(config):
            if kind == "up":
                params += _up_param(rng, name, cin, cout)
            else:
                params += _conv_param(rng, name, cin, cout, 1 if kind == "head" else KERNEL)
    else:
        raise TypeError(f"unknown config {config!r}")
    return params


class _Net:
    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = init_weights(config, seed) if params is None else list(params)
        self._by_name = {p.name: p for p in self.params}
        if len(self._by_name) != len(self.params):
            raise ValueError("parameter names must be unique")
        expected = {p.name: p.shape for p in init_weights(config, 0)}
        got = {p.name: p.shape for p in self.params}
        if expected != got:
            raise ValueError("parameters do not match the network configuration")

    def __getitem__(self, name):
        return self._by_name[name]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def set_trainable(self, flag):
        for p in self.params:
            p.requires_grad = flag

    def state(self):
        return {p.name: p.data.copy() for p in self.params}

    def _conv(self, x, name, stride, padding=1):
        return conv3d(x, self[f"{name}.w"], self[f"{name}.b"], stride, padding)

    def _check_input(self, x, factor):
        if x.data.ndim != 5 or x.shape[:2] != (1, 1):
            raise ValueError(f"expected a (1, 1, D, H, W) tensor, got {x.shape}")
        if any(n % factor for n in x.shape[2:]):
            raise ValueError(f"spatial extents {x.shape[2:]} must be divisible by {factor}")


class ShapeLearner(_Net):
    """Maps a (soft) label map to a one-channel low-resolution signature."""

    @property
    def factor(self):
        return 2 ** self.config.levels

    def forward(self, m):
        self._check_input(m, self.factor)
        x = m
        for name, _, _, stride, act in _shape_layers(self.config):
            x = self._conv(x, name, stride)
            if act:
                x = relu(x)
        return x

    __call__ = forward


class SegNet(_Net):
    """U-Net with stride-2 downsampling, k=2 transposed-conv upsampling and a sigmoid head."""

    @property
    def factor(self):
        return 2 ** self.config.depth

    def logits(self, image):
        self._check_input(image, self.factor)
        skips = []
        x = image
        for lvl in range(self.config.depth):
            x = relu(self._conv(x, f"enc{lvl}", 1))
            skips.append(x)
            x = relu(self._conv(x, f"down{lvl}", 2))
        x = relu(self._conv(x, "bottom", 1))
        for lvl in reversed(range(self.config.depth)):
            x = relu(conv_transpose3d(x, self[f"up{lvl}.w"], self[f"up{lvl}.b"], 2, 0))
            x = concat_channels(x, skips[lvl])
            x = relu(self._conv(x, f"dec{lvl}", 1))
        return self._conv(x, "head", 1, padding=0)

    def forward(self, image):
        return sigmoid(self.logits(image))

    __call__ = forward


def as_input(volume_data):
    """Wrap a (D, H, W) array as a (1, 1, D, H, W) float32 tensor."""
    arr = np.asarray(volume_data, dtype=np.float32)
    return Tensor(arr.reshape((1, 1) + arr.shape))


# --- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"SSCK"
CKPT_VERSION = 1
_CONFIG_PREFIX = "__config__."
_KINDS = {"shape_learner": (ShapeLearner, ShapeNetConfig), "segnet": (SegNet, SegNetConfig)}


class CheckpointError(ValueError):
    pass


class CheckpointTypeError(CheckpointError):
    """The checkpoint holds a different kind of network."""


def _kind_of(net):
    for kind, (cls, _) in _KINDS.items():
        if type(net) is cls:
            return kind
    raise TypeError(f"cannot checkpoint {type(net).__name__}")


def _pack_entry(name, arr):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    out = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    return out


def save_checkpoint(net, path):
    """Write ``net`` in SSCK format.

    The first entry is a rank-1 pseudo-parameter ``__config__.<kind>`` whose
    values are the config fields in declaration order; it carries the
    network type tag and configuration.
    """
    kind = _kind_of(net)
    cfg = np.array(list(asdict(net.config).values()), dtype=np.float32)
    entries = [(_CONFIG_PREFIX + kind, cfg)] + [(p.name, p.data) for p in net.params]
    blob = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(entries))
    blob += b"".join(_pack_entry(n, a) for n, a in entries)
    with open(path, "wb") as fh:
        fh.write(blob)


def _read_entries(raw):
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError("not an SSCK checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos, entries = 12, []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise CheckpointError("truncated name")
            pos += n
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(raw):
                raise CheckpointError(f"payload of {name!r} is truncated")
            arr = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
            pos += size
            entries.append((name, arr.astype(np.float32)))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after last entry")
    return entries


def load_checkpoint(path, expect=None):
    """Load a network; ``expect`` ("shape_learner" or "segnet") enforces its type."""
    with open(path, "rb") as fh:
        raw = fh.read()
    entries = _read_entries(raw)
    if not entries or not entries[0][0].startswith(_CONFIG_PREFIX):
        raise CheckpointError("checkpoint has no config entry")
    kind = entries[0][0][len(_CONFIG_PREFIX):]
    if kind not in _KINDS:
        raise CheckpointTypeError(f"unknown network type {kind!r}")
    if expect is not None and kind != expect:
        raise CheckpointTypeError(f"checkpoint holds a {kind}, expected a {expect}")
    cls, cfg_cls = _KINDS[kind]
    fields = list(cfg_cls.__dataclass_fields__)
    values = entries[0][1]
    if values.shape != (len(fields),):
        raise CheckpointError("config entry has the wrong length")
    config = cfg_cls(**{f: int(v) for f, v in zip(fields, values)})
    params = [Parameter(n, a) for n, a in entries[1:]]
    try:
        return cls(config, params)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
