"""The dilated, densely connected flow estimator.

Two stride-2 layers bring the input pair to quarter resolution; everything
after runs at that resolution, with dilation factors 2 -> 4 -> 2 -> 1 in the
conv3_1/conv4_1/conv5_1/conv6_1 slots widening the receptive field and then
annealing it back down so the tap lattice of the 4-dilated layer cannot
leave zero-gradient holes. There is no deconvolution anywhere: the single
2-channel prediction is made at quarter resolution in full-resolution pixel
units and bilinearly upsampled, so the upsampling step interpolates values
without rescaling them.

Dense connectivity: each group from conv3 onward consumes the concatenation
of every earlier group's output (resized to the consumer's resolution) plus
the 6-channel image pair downsampled to that resolution. The prediction
layer is wired the same way. The predictor is zero-initialized so an
untrained network outputs exactly zero flow.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CheckpointError, ShapeError
from .tensor import Bias, ConvSpec, FilterBank, Graph, Tensor4

LEAKY_SLOPE = 0.1
RGB_CHANNELS = 6
CHECKPOINT_MAGIC = b"DUF1"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kernel: int
    stride: int
    dilation: int
    out_channels: int
    takes_dense_input: bool = False
    takes_rgb_route: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"layer {self.name}: kernel must be odd and positive, got {self.kernel}")
        if self.stride < 1 or self.dilation < 1 or self.out_channels < 1:
            raise ShapeError(f"layer {self.name}: bad stride/dilation/channels")

    @property
    def padding(self) -> int:
        # same-resolution padding (exact size halving for the strided layers)
        return self.dilation * (self.kernel - 1) // 2


DEFAULT_LAYERS: tuple = (
    LayerSpec("conv1", 7, 2, 1, 64),
    LayerSpec("conv2", 5, 2, 1, 128),
    LayerSpec("conv3", 3, 1, 1, 256, takes_dense_input=True, takes_rgb_route=True),
    LayerSpec("conv3_1", 3, 1, 2, 256),
    LayerSpec("conv4", 3, 1, 1, 512, takes_dense_input=True, takes_rgb_route=True),
    LayerSpec("conv4_1", 3, 1, 4, 512),
    LayerSpec("conv5", 3, 1, 1, 512, takes_dense_input=True, takes_rgb_route=True),
    LayerSpec("conv5_1", 3, 1, 2, 512),
    LayerSpec("conv6", 3, 1, 1, 1024, takes_dense_input=True, takes_rgb_route=True),
    LayerSpec("conv6_1", 3, 1, 1, 1024),
    LayerSpec("predictor", 3, 1, 1, 2, takes_dense_input=True, takes_rgb_route=True),
)

# dilation schedule the default table must carry (degridding: 2, 4, 2, 1)
_DEFAULT_DILATIONS = {"conv3_1": 2, "conv4_1": 4, "conv5_1": 2, "conv6_1": 1}


@dataclass(frozen=True)
class NetworkConfig:
    width_multiplier: float = 1.0
    layers: tuple = DEFAULT_LAYERS
    in_channels: int = RGB_CHANNELS

    def __post_init__(self):
        if not 0.0 < self.width_multiplier <= 1.0:
            raise ShapeError(f"width_multiplier must lie in (0, 1], got {self.width_multiplier}")
        if self.layers is DEFAULT_LAYERS:
            for spec in self.layers:
                if spec.stride > 1 and spec.name not in ("conv1", "conv2"):
                    raise ShapeError(f"default table: stride > 1 only allowed for conv1/conv2")
                want = _DEFAULT_DILATIONS.get(spec.name)
                if want is not None and spec.dilation != want:
                    raise ShapeError(f"default table: {spec.name} must have dilation {want}")

    def scaled_channels(self, spec: LayerSpec) -> int:
        if spec.name == "predictor":
            return spec.out_channels
        return max(1, int(np.ceil(spec.out_channels * self.width_multiplier)))

    @property
    def stride_product(self) -> int:
        p = 1
        for spec in self.layers:
            p *= spec.stride
        return p


@dataclass
class _LayerPlan:
    spec: LayerSpec
    in_channels: int
    out_channels: int
    group_index: int
    starts_group: bool


def _plan_layers(config: NetworkConfig):
    """Static shape propagation: group structure and per-layer channel counts.

    A layer opens a new group when it takes dense input, changes resolution,
    or is the first layer; others chain inside the current group. Dense
    consumers read every finished group's output plus (optionally) the
    routed input pair.
    """
    plans = []
    group_channels: list[int] = []  # out-channels of each finished group
    current = config.in_channels
    group_index = -1
    for i, spec in enumerate(config.layers):
        starts = i == 0 or spec.takes_dense_input or spec.stride > 1
        if starts:
            if group_index >= 0:
                group_channels.append(current)
            group_index += 1
        if spec.takes_dense_input:
            in_ch = sum(group_channels)
            if spec.takes_rgb_route:
                in_ch += config.in_channels
        else:
            in_ch = current
        out_ch = config.scaled_channels(spec)
        plans.append(_LayerPlan(spec, in_ch, out_ch, group_index, starts))
        current = out_ch
    return plans


class FlowNetwork:
    """Built network: ordered layers plus a name -> parameter registry."""

    def __init__(self, config: NetworkConfig, plans, params):
        self.config = config
        self.plans = plans
        self.params = params  # dict name -> FilterBank | Bias, insertion-ordered

    def parameters(self):
        return self.params.items()

    def parameter_count(self) -> int:
        return sum(int(p.data.size) for p in self.params.values())

    def weight(self, name: str) -> FilterBank:
        return self.params[f"{name}.weight"]

    def bias(self, name: str) -> Bias:
        return self.params[f"{name}.bias"]

    def set_requires_grad(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def layer_table(self):
        rows = []
        for plan in self.plans:
            s = plan.spec
            rows.append(
                (s.name, s.kernel, s.stride, s.dilation, plan.in_channels, plan.out_channels)
            )
        return rows

    def forward(self, g: Graph, pair: Tensor4):
        """Run the network; returns (flow at input resolution, raw prediction).

        The raw prediction lives at 1/stride_product resolution but already
        in full-resolution pixel units; upsampling only interpolates.
        """
        n, c, h, w = pair.shape
        if c != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels}-channel input pair, got {pair.shape}")
        sp = self.config.stride_product
        if h % sp or w % sp:
            raise ShapeError(
                f"input {h}x{w} not divisible by {sp}; pad the frames to a multiple of {sp} first"
            )

        routed: dict = {}

        def routed_input(hw):
            if hw not in routed:
                routed[hw] = (
                    pair if hw == (h, w) else g.resize_bilinear(pair, hw[0], hw[1])
                )
            return routed[hw]

        group_outputs: list[Tensor4] = []
        x = pair
        prev_group_index = -1
        for plan in self.plans:
            if plan.starts_group and plan.group_index > 0:
                group_outputs.append(x)
            if plan.spec.takes_dense_input:
                target_hw = (x.shape[2], x.shape[3])
                parts = [
                    o if (o.shape[2], o.shape[3]) == target_hw
                    else g.resize_bilinear(o, *target_hw)
                    for o in group_outputs
                ]
                if plan.spec.takes_rgb_route:
                    parts.append(routed_input(target_hw))
                x = g.concat_channels(parts)
            x = g.conv2d(
                x,
                self.weight(plan.spec.name),
                self.bias(plan.spec.name),
                ConvSpec(plan.spec.stride, plan.spec.dilation, plan.spec.padding),
            )
            if plan.spec.name != "predictor":
                x = g.leaky_relu(x, LEAKY_SLOPE)
            prev_group_index = plan.group_index
        raw = x
        if raw.shape[2:] == (h, w):
            full = raw
        else:
            full = g.resize_bilinear(raw, h, w)
        return full, raw


def build_network(config: NetworkConfig, seed: int, dtype=np.float32) -> FlowNetwork:
    """Allocate and initialize parameters: fan-in-scaled uniform weights,
    zero biases, and an all-zero predictor layer."""
    plans = _plan_layers(config)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params: dict = {}
    for plan in plans:
        s = plan.spec
        shape = (plan.out_channels, plan.in_channels, s.kernel, s.kernel)
        if s.name == "predictor":
            w = np.zeros(shape, dtype=dtype)
        else:
            fan_in = plan.in_channels * s.kernel * s.kernel
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[f"{s.name}.weight"] = FilterBank(w, requires_grad=True)
        params[f"{s.name}.bias"] = Bias(np.zeros(plan.out_channels, dtype=dtype), requires_grad=True)
    return FlowNetwork(config, plans, params)


def receptive_field_mask(net: FlowNetwork, input_hw, out_pixel, channel: int = 0) -> np.ndarray:
    """Boolean (H, W) support of one raw-output unit w.r.t. the input.

    Runs a surrogate copy of the network whose weights are all one (biases
    zero) so positive contributions cannot cancel, then thresholds the
    input gradient of the selected raw-output pixel.
    """
    h, w = input_hw
    probe = build_network(net.config, seed=0, dtype=np.float64)
    for name, p in probe.params.items():
        if name.endswith(".weight"):
            p.data = np.ones_like(p.data)
        else:
            p.data = np.zeros_like(p.data)
    x = Tensor4(np.ones((1, net.config.in_channels, h, w), dtype=np.float64), requires_grad=True)
    g = Graph()
    _, raw = probe.forward(g, x)
    oy, ox = out_pixel
    _, _, rh, rw = raw.shape
    if not (0 <= oy < rh and 0 <= ox < rw):
        raise ShapeError(f"out_pixel {out_pixel} outside raw output {rh}x{rw}")
    picked = g.crop(g.take_channel(raw, channel), oy, ox, 1, 1)
    g.backward(g.reduce_mean(picked))
    return (np.abs(x.grad).sum(axis=(0, 1)) > 0.0)


# --------------------------------------------------------------------------- #
# parameter accounting


def _conv_params(kernel: int, in_ch: int, out_ch: int) -> int:
    return kernel * kernel * in_ch * out_ch + out_ch


def dilated_parameter_count(multiplier: float = 1.0) -> int:
    """Registry-equivalent parameter count of the default dilated config."""
    total = 0
    for plan in _plan_layers(NetworkConfig(width_multiplier=multiplier)):
        total += _conv_params(plan.spec.kernel, plan.in_channels, plan.out_channels)
    return total


def flownets_reference_parameter_count(multiplier: float = 1.0) -> int:
    """Parameter count of a FlowNetS-shaped reference wired identically.

    Same counting rules and same dense-connectivity convention as the
    dilated config, applied to a FlowNetS-shaped layer table: a strided
    encoder (5x5 conv3, stride-2 conv3..conv6) plus the deconvolutional
    decoder with per-scale predictors that dilation makes unnecessary.
    Kernel/in/out arithmetic only; nothing here is ever executed.
    """

    def scaled(c):
        return max(1, int(np.ceil(c * multiplier)))

    rgb = RGB_CHANNELS
    total = 0
    finished: list[int] = []  # finished group output channels

    def dense_in():
        return sum(finished) + rgb

    # encoder: group heads take dense input from conv3 on, second layers chain
    c1, c2 = scaled(64), scaled(128)
    total += _conv_params(7, rgb, c1)
    finished.append(c1)
    total += _conv_params(5, c1, c2)
    finished.append(c2)
    for kernel, width in ((5, 256), (3, 512), (3, 512), (3, 1024)):
        ch = scaled(width)
        total += _conv_params(kernel, dense_in(), ch)  # strided group head
        total += _conv_params(3, ch, ch)  # chained *_1 layer
        finished.append(ch)

    # decoder: every unit is its own group under the same dense wiring;
    # deconv parameter tensors are 4x4 (kernel size only enters the count)
    def deconv_params(in_ch, out_ch):
        return 4 * 4 * in_ch * out_ch + out_ch

    for unit, width in (
        ("predict", 2),
        ("deconv", 512),
        ("predict", 2),
        ("deconv", 256),
        ("predict", 2),
        ("deconv", 128),
        ("predict", 2),
        ("deconv", 64),
        ("predict", 2),
    ):
        ch = width if unit == "predict" else scaled(width)
        if unit == "predict":
            total += _conv_params(3, dense_in(), ch)
        else:
            total += deconv_params(dense_in(), ch)
        finished.append(ch)
    # the four fixed 2-channel flow-upsampling deconvs
    total += 4 * deconv_params(2, 2)
    return total


# --------------------------------------------------------------------------- #
# checkpoint container


def write_checkpoint(path, entries):
    """Write named float32 tensors: magic, count, then per entry
    (u16 name length, name, u8 rank, u32 dims, raw little-endian floats)."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            data = np.ascontiguousarray(np.atleast_1d(np.asarray(arr)), dtype="<f4")
            blob = name.encode("utf-8")
            f.write(struct.pack("<H", len(blob)))
            f.write(blob)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def read_checkpoint(path):
    """Read a checkpoint back into an ordered name -> float32 array dict."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (count,) = struct.unpack_from("<I", raw, 4)
    off = 8
    entries: dict = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            entries[name] = arr.copy()
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from e
    if off > len(raw):
        raise CheckpointError(f"{path}: truncated checkpoint ({off} > {len(raw)} bytes)")
    return entries


def network_entries(net: FlowNetwork):
    entries = {"meta.width_multiplier": np.array([net.config.width_multiplier], dtype=np.float32)}
    for name, p in net.parameters():
        entries[name] = p.data
    return entries


def save_network(net: FlowNetwork, path):
    write_checkpoint(path, network_entries(net))


def load_network(path, extra_entries=None) -> FlowNetwork:
    """Rebuild a default-architecture network from a checkpoint.

    Optionally returns unclaimed entries (optimizer state, metadata) through
    `extra_entries` (a dict the caller supplies).
    """
    entries = read_checkpoint(path)
    if "meta.width_multiplier" not in entries:
        raise CheckpointError(f"{path}: missing meta.width_multiplier entry")
    mult = float(entries["meta.width_multiplier"][0])
    net = build_network(NetworkConfig(width_multiplier=mult), seed=0, dtype=np.float32)
    claimed = {"meta.width_multiplier"}
    for name, p in net.parameters():
        if name not in entries:
            raise CheckpointError(f"{path}: missing parameter {name}")
        arr = entries[name].reshape(p.data.shape)
        p.data = arr.astype(np.float32)
        claimed.add(name)
    if extra_entries is not None:
        for k, v in entries.items():
            if k not in claimed:
                extra_entries[k] = v
    return net
