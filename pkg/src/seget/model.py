"""The SegET network.

Topology: `depth` encoder blocks (three stride-1 convs, the third
reducing channels for the skip tap, then a stride-2 conv replacing
pooling), a center of two feature convs plus parallel dilated branches
whose outputs are stacked with the encoded input and reduced by a 1x1
conv, `depth` decoder blocks (bilinear 2x, skip concat, two convs), and
a multi-level fusion stage that progressively merges the deeper decoder
outputs before two refining convs and the final 1x1 logit conv. Every
conv is followed by BN and ReLU except the logit conv, which must stay
unbounded.

Backward passes are hand-wired in reverse graph order; forward caches
are held per layer instance and stay valid until the next forward, so
repeated backward calls accumulate gradients additively.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .tensor import (
    ConvSpec,
    Parameter,
    Tensor,
    init_bn_params,
    init_conv_params,
)


@dataclass
class NetworkConfig:
    base_filters: int = 16
    depth: int = 4
    dilation_rates: tuple[int, ...] = (1, 2, 4, 8)
    input_channels: int = 1
    skip_reduction: int = 2
    center_concat_input: bool = True
    upsample_mode: str = "half_pixel"
    dtype: str = "float32"

    def __post_init__(self) -> None:
        self.dilation_rates = tuple(int(r) for r in self.dilation_rates)
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        if not self.dilation_rates or any(r < 1 for r in self.dilation_rates):
            raise ValueError("dilation_rates must be non-empty with all rates >= 1")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if self.skip_reduction < 1:
            raise ValueError("skip_reduction must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if self.upsample_mode not in ("half_pixel", "align_corners"):
            raise ValueError("upsample_mode must be 'half_pixel' or 'align_corners'")

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.depth

    def filters(self, block: int) -> int:
        """Filter count doubles per encoder block."""
        return self.base_filters * (2 ** block)

    def skip_channels(self, block: int) -> int:
        return max(self.filters(block) // self.skip_reduction, 1)

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.dtype == "float32" else np.float64)

    def to_dict(self) -> dict:
        return {
            "base_filters": self.base_filters,
            "depth": self.depth,
            "dilation_rates": list(self.dilation_rates),
            "input_channels": self.input_channels,
            "skip_reduction": self.skip_reduction,
            "center_concat_input": self.center_concat_input,
            "upsample_mode": self.upsample_mode,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            base_filters=d["base_filters"],
            depth=d["depth"],
            dilation_rates=tuple(d["dilation_rates"]),
            input_channels=d["input_channels"],
            skip_reduction=d["skip_reduction"],
            center_concat_input=d["center_concat_input"],
            upsample_mode=d["upsample_mode"],
            dtype=d["dtype"],
        )


# ---------------------------------------------------------------------------
# layer wrappers: each owns its parameters and one forward cache
# ---------------------------------------------------------------------------

class _Conv:
    def __init__(self, name: str, spec: ConvSpec, rng: np.random.Generator, dtype,
                 use_bias: bool = True):
        self.name = name
        self.spec = spec
        self.kernel, bias = init_conv_params(spec, rng, dtype)
        self.bias = bias if use_bias else None
        self._cache: ops.Conv2dCache | None = None

    def forward(self, x: Tensor) -> Tensor:
        y, self._cache = ops.conv2d_forward(x, self.spec, self.kernel, self.bias)
        return y

    def backward(self, g: Tensor) -> Tensor:
        return ops.conv2d_backward(g, self._cache, self.spec, self.kernel, self.bias)

    def parameters(self) -> dict[str, Parameter]:
        p = {f"{self.name}.kernel": self.kernel}
        if self.bias is not None:
            p[f"{self.name}.bias"] = self.bias
        return p


class _ConvBnRelu:
    """conv 3x3/1x1 -> batchnorm -> relu, the repeated unit of the network.

    The conv carries no bias: batch normalization's mean subtraction
    absorbs any constant shift, so the parameter would be dead weight.
    """

    def __init__(self, name: str, spec: ConvSpec, rng: np.random.Generator, dtype):
        self.name = name
        self.conv = _Conv(name, spec, rng, dtype, use_bias=False)
        self.gamma, self.beta = init_bn_params(spec.out_channels, dtype)
        self.state = ops.BatchNormState.create(spec.out_channels, dtype)
        self._bn_cache: ops.BatchNormCache | None = None
        self._relu_cache: np.ndarray | None = None

    @property
    def spec(self) -> ConvSpec:
        return self.conv.spec

    def forward(self, x: Tensor, mode: str) -> Tensor:
        h = self.conv.forward(x)
        h, self._bn_cache = ops.batchnorm_forward(h, self.gamma, self.beta, self.state, mode)
        h, self._relu_cache = ops.relu_forward(h)
        return h

    def backward(self, g: Tensor) -> Tensor:
        g = ops.relu_backward(g, self._relu_cache)
        g = ops.batchnorm_backward(g, self._bn_cache, self.gamma, self.beta)
        return self.conv.backward(g)

    def parameters(self) -> dict[str, Parameter]:
        p = self.conv.parameters()
        p[f"{self.name}.gamma"] = self.gamma
        p[f"{self.name}.beta"] = self.beta
        return p


class _Upsample:
    def __init__(self, mode: str):
        self.mode = mode
        self._cache: ops.UpsampleCache | None = None

    def forward(self, x: Tensor) -> Tensor:
        y, self._cache = ops.bilinear_upsample_2x_forward(x, self.mode)
        return y

    def backward(self, g: Tensor) -> Tensor:
        return ops.bilinear_upsample_2x_backward(g, self._cache)


class _Concat:
    def __init__(self) -> None:
        self._cache: list[int] | None = None

    def forward(self, xs: list[Tensor]) -> Tensor:
        y, self._cache = ops.concat_channels_forward(xs)
        return y

    def backward(self, g: Tensor) -> list[Tensor]:
        return ops.concat_channels_backward(g, self._cache)


def _add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(a.data + b.data)


# ---------------------------------------------------------------------------
# describe() output
# ---------------------------------------------------------------------------

@dataclass
class LayerRow:
    name: str
    kind: str  # conv | upsample | concat
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    params: int
    stride: int
    dilation: int


@dataclass
class NetworkSummary:
    rows: list[LayerRow]
    total_params: int
    downsample_factor: int
    center_conv_count: int
    encoder_convs_per_block: int
    decoder_block_count: int

    def table(self) -> str:
        lines = [f"{'name':<18}{'kind':<10}{'in':<16}{'out':<16}{'params':>8}  s  d"]
        for r in self.rows:
            lines.append(
                f"{r.name:<18}{r.kind:<10}{str(r.in_shape):<16}{str(r.out_shape):<16}"
                f"{r.params:>8}  {r.stride}  {r.dilation}"
            )
        lines.append(
            f"total params {self.total_params}; downsample x{self.downsample_factor}; "
            f"center convs {self.center_conv_count}; "
            f"encoder convs/block {self.encoder_convs_per_block}"
        )
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

class SegETNetwork:
    """Instantiated layer graph with a stable-name parameter registry.

    A single instance is single-writer: forward, backward, and optimizer
    steps must not interleave across threads. Frozen inference is safe
    concurrently on separate instances.
    """

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        up = config.upsample_mode
        depth = config.depth
        f_top = config.filters(depth - 1)

        self.encoder: list[dict] = []
        prev = config.input_channels
        for i in range(depth):
            f = config.filters(i)
            sk = config.skip_channels(i)
            blk = {
                "c1": _ConvBnRelu(f"enc{i}.c1", ConvSpec(prev, f), rng, dt),
                "c2": _ConvBnRelu(f"enc{i}.c2", ConvSpec(f, f), rng, dt),
                "c3": _ConvBnRelu(f"enc{i}.c3", ConvSpec(f, sk), rng, dt),
                "c4": _ConvBnRelu(f"enc{i}.c4", ConvSpec(sk, f, stride=2), rng, dt),
            }
            self.encoder.append(blk)
            prev = f

        self.center_c1 = _ConvBnRelu("center.c1", ConvSpec(f_top, 2 * f_top), rng, dt)
        self.center_c2 = _ConvBnRelu("center.c2", ConvSpec(2 * f_top, 2 * f_top), rng, dt)
        self.center_branches = [
            _ConvBnRelu(f"center.b{idx}", ConvSpec(2 * f_top, f_top, dilation=r), rng, dt)
            for idx, r in enumerate(config.dilation_rates)
        ]
        self.center_concat = _Concat()
        cc = len(config.dilation_rates) * f_top
        if config.center_concat_input:
            cc += f_top
        self.center_reduce = _ConvBnRelu("center.reduce", ConvSpec(cc, 2 * f_top, kernel=1), rng, dt)

        self.decoder: list[dict] = []
        h_ch = 2 * f_top
        for j in range(depth):
            e = depth - 1 - j
            f = config.filters(e)
            sk = config.skip_channels(e)
            blk = {
                "up": _Upsample(up),
                "concat": _Concat(),
                "c1": _ConvBnRelu(f"dec{j}.c1", ConvSpec(h_ch + sk, f), rng, dt),
                "c2": _ConvBnRelu(f"dec{j}.c2", ConvSpec(f, f), rng, dt),
            }
            self.decoder.append(blk)
            h_ch = f

        # progressive fusion of the deeper decoder outputs (step one), then
        # merge with the last block's output and refine (step two)
        self.fusion: list[dict] = []
        if depth >= 2:
            h_ch = config.filters(depth - 1)
            for t in range(1, depth - 1):
                d_ch = config.filters(depth - 1 - t)
                self.fusion.append({
                    "up": _Upsample(up),
                    "concat": _Concat(),
                    "conv": _ConvBnRelu(f"fuse{t}.c", ConvSpec(h_ch + d_ch, d_ch), rng, dt),
                })
                h_ch = d_ch
            self.head_up = _Upsample(up)
            self.head_concat = _Concat()
            head_in = h_ch + config.base_filters
        else:
            self.head_up = None
            self.head_concat = None
            head_in = config.base_filters
        self.head_c1 = _ConvBnRelu("head.c1", ConvSpec(head_in, config.base_filters), rng, dt)
        self.head_c2 = _ConvBnRelu(
            "head.c2", ConvSpec(config.base_filters, config.base_filters), rng, dt
        )
        self.head_logit = _Conv("head.logit", ConvSpec(config.base_filters, 1, kernel=1), rng, dt)

        self._params: dict[str, Parameter] = {}
        self._bn_states: dict[str, ops.BatchNormState] = {}
        for unit in self._conv_units():
            self._params.update(unit.parameters())
            if isinstance(unit, _ConvBnRelu):
                self._bn_states[unit.name] = unit.state

        self._forward_done = False
        self._logits_shape: tuple[int, ...] | None = None
        self._last_ablated: tuple[int, ...] = ()

    # -- wiring helpers ----------------------------------------------------

    def _conv_units(self) -> list:
        units: list = []
        for blk in self.encoder:
            units += [blk["c1"], blk["c2"], blk["c3"], blk["c4"]]
        units += [self.center_c1, self.center_c2, *self.center_branches, self.center_reduce]
        for blk in self.decoder:
            units += [blk["c1"], blk["c2"]]
        for fu in self.fusion:
            units.append(fu["conv"])
        units += [self.head_c1, self.head_c2, self.head_logit]
        return units

    @property
    def parameters(self) -> dict[str, Parameter]:
        return self._params

    @property
    def bn_states(self) -> dict[str, ops.BatchNormState]:
        return self._bn_states

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    # -- forward -----------------------------------------------------------

    def forward(self, batch: Tensor, mode: str = "train",
                ablate_skips: Sequence[int] = ()) -> Tensor:
        """Logit map, shape N x 1 x H x W. ablate_skips is a diagnostic that
        zeroes the listed encoder skip taps (used by the liveness probe)."""
        depth = self.config.depth
        n, c, h, w = batch.shape
        if c != self.config.input_channels:
            raise ValueError(
                f"batch has {c} channels, network expects {self.config.input_channels}"
            )
        factor = self.config.downsample_factor
        if h % factor or w % factor:
            raise ValueError(
                f"spatial extents ({h}, {w}) must both be divisible by "
                f"2^depth = {factor} for depth {depth}"
            )
        ablate = tuple(ablate_skips)
        skips: list[Tensor] = []
        x = batch
        for i, blk in enumerate(self.encoder):
            x = blk["c1"].forward(x, mode)
            x = blk["c2"].forward(x, mode)
            x = blk["c3"].forward(x, mode)
            skips.append(Tensor(np.zeros_like(x.data)) if i in ablate else x)
            x = blk["c4"].forward(x, mode)

        center_in = x
        x = self.center_c1.forward(center_in, mode)
        x = self.center_c2.forward(x, mode)
        branch_outs = [b.forward(x, mode) for b in self.center_branches]
        cat = branch_outs + ([center_in] if self.config.center_concat_input else [])
        x = self.center_concat.forward(cat)
        x = self.center_reduce.forward(x, mode)

        d_outs: list[Tensor] = []
        for j, blk in enumerate(self.decoder):
            x = blk["up"].forward(x)
            x = blk["concat"].forward([x, skips[depth - 1 - j]])
            x = blk["c1"].forward(x, mode)
            x = blk["c2"].forward(x, mode)
            d_outs.append(x)

        if depth == 1:
            x = d_outs[0]
        else:
            x = d_outs[0]
            for t, fu in enumerate(self.fusion, start=1):
                x = fu["up"].forward(x)
                x = fu["concat"].forward([x, d_outs[t]])
                x = fu["conv"].forward(x, mode)
            x = self.head_up.forward(x)
            x = self.head_concat.forward([x, d_outs[depth - 1]])
        x = self.head_c1.forward(x, mode)
        x = self.head_c2.forward(x, mode)
        logits = self.head_logit.forward(x)

        self._forward_done = True
        self._logits_shape = logits.shape
        self._last_ablated = ablate
        return logits

    # -- backward ----------------------------------------------------------

    def backward(self, grad_logits: Tensor) -> None:
        """Accumulates every registered parameter's gradient; input
        gradients are not exposed."""
        if not self._forward_done:
            raise ValueError("backward requires a preceding forward pass")
        if grad_logits.shape != self._logits_shape:
            raise ValueError(
                f"grad shape {grad_logits.shape} does not match logits {self._logits_shape}"
            )
        depth = self.config.depth
        g = self.head_logit.backward(grad_logits)
        g = self.head_c2.backward(g)
        g = self.head_c1.backward(g)

        d_grads: list[Tensor | None] = [None] * depth
        if depth == 1:
            d_grads[0] = g
        else:
            g_up, g_last = self.head_concat.backward(g)
            d_grads[depth - 1] = g_last
            g = self.head_up.backward(g_up)
            for t in range(len(self.fusion), 0, -1):
                fu = self.fusion[t - 1]
                g = fu["conv"].backward(g)
                g_up, g_dt = fu["concat"].backward(g)
                d_grads[t] = g_dt
                g = fu["up"].backward(g_up)
            d_grads[0] = g

        skip_grads: list[Tensor | None] = [None] * depth
        g_down: Tensor | None = None
        for j in reversed(range(depth)):
            blk = self.decoder[j]
            g_out = d_grads[j]
            if g_down is not None:
                g_out = _add(g_out, g_down)
            g = blk["c2"].backward(g_out)
            g = blk["c1"].backward(g)
            g_up, g_skip = blk["concat"].backward(g)
            skip_grads[depth - 1 - j] = g_skip
            g_down = blk["up"].backward(g_up)

        g = self.center_reduce.backward(g_down)
        parts = self.center_concat.backward(g)
        n_br = len(self.center_branches)
        g_c2: Tensor | None = None
        for branch, gb in zip(self.center_branches, parts[:n_br]):
            gin = branch.backward(gb)
            g_c2 = gin if g_c2 is None else _add(g_c2, gin)
        g = self.center_c2.backward(g_c2)
        g = self.center_c1.backward(g)
        if self.config.center_concat_input:
            g = _add(g, parts[-1])

        for i in reversed(range(depth)):
            blk = self.encoder[i]
            g = blk["c4"].backward(g)
            if i not in self._last_ablated:
                g = _add(g, skip_grads[i])
            g = blk["c3"].backward(g)
            g = blk["c2"].backward(g)
            g = blk["c1"].backward(g)

    # -- introspection -----------------------------------------------------

    def describe(self, ref_hw: tuple[int, int] | None = None) -> NetworkSummary:
        """Layer table via static shape propagation at a reference input."""
        cfg = self.config
        depth = cfg.depth
        if ref_hw is None:
            s = 4 * cfg.downsample_factor
            ref_hw = (s, s)
        h, w = ref_hw
        rows: list[LayerRow] = []

        def shp(c: int, hh: int, ww: int) -> tuple[int, ...]:
            return (1, c, hh, ww)

        def conv_row(unit, c_in: int, hh: int, ww: int) -> tuple[int, int, int]:
            spec = unit.spec
            oh, ow = spec.out_spatial(hh, ww)
            n_params = sum(p.value.size for p in unit.parameters().values())
            rows.append(LayerRow(unit.name, "conv", shp(c_in, hh, ww),
                                 shp(spec.out_channels, oh, ow),
                                 n_params, spec.stride, spec.dilation))
            return spec.out_channels, oh, ow

        def up_row(name: str, c: int, hh: int, ww: int) -> tuple[int, int, int]:
            rows.append(LayerRow(name, "upsample", shp(c, hh, ww), shp(c, 2 * hh, 2 * ww), 0, 2, 1))
            return c, 2 * hh, 2 * ww

        def cat_row(name: str, cs: list[int], hh: int, ww: int) -> int:
            rows.append(LayerRow(name, "concat", shp(cs[0], hh, ww), shp(sum(cs), hh, ww), 0, 1, 1))
            return sum(cs)

        c, hh, ww = cfg.input_channels, h, w
        skip_dims: list[tuple[int, int, int]] = []
        for i, blk in enumerate(self.encoder):
            c, hh, ww = conv_row(blk["c1"], c, hh, ww)
            c, hh, ww = conv_row(blk["c2"], c, hh, ww)
            c, hh, ww = conv_row(blk["c3"], c, hh, ww)
            skip_dims.append((c, hh, ww))
            c, hh, ww = conv_row(blk["c4"], c, hh, ww)

        center_c, center_h, center_w = c, hh, ww
        c, hh, ww = conv_row(self.center_c1, c, hh, ww)
        c, hh, ww = conv_row(self.center_c2, c, hh, ww)
        branch_c = 0
        for b in self.center_branches:
            bc, _, _ = conv_row(b, c, hh, ww)
            branch_c += bc
        cat_cs = [branch_c] if not cfg.center_concat_input else [branch_c, center_c]
        c = cat_row("center.concat", cat_cs, hh, ww)
        c, hh, ww = conv_row(self.center_reduce, c, hh, ww)

        d_dims: list[tuple[int, int, int]] = []
        for j, blk in enumerate(self.decoder):
            c, hh, ww = up_row(f"dec{j}.up", c, hh, ww)
            sk_c = skip_dims[depth - 1 - j][0]
            c = cat_row(f"dec{j}.concat", [c, sk_c], hh, ww)
            c, hh, ww = conv_row(blk["c1"], c, hh, ww)
            c, hh, ww = conv_row(blk["c2"], c, hh, ww)
            d_dims.append((c, hh, ww))

        if depth >= 2:
            c, hh, ww = d_dims[0]
            for t, fu in enumerate(self.fusion, start=1):
                c, hh, ww = up_row(f"fuse{t}.up", c, hh, ww)
                c = cat_row(f"fuse{t}.concat", [c, d_dims[t][0]], hh, ww)
                c, hh, ww = conv_row(fu["conv"], c, hh, ww)
            c, hh, ww = up_row("head.up", c, hh, ww)
            c = cat_row("head.concat", [c, d_dims[depth - 1][0]], hh, ww)
        else:
            c, hh, ww = d_dims[0]
        c, hh, ww = conv_row(self.head_c1, c, hh, ww)
        c, hh, ww = conv_row(self.head_c2, c, hh, ww)
        conv_row(self.head_logit, c, hh, ww)

        total = sum(p.value.size for p in self._params.values())
        center_convs = sum(
            1 for r in rows if r.kind == "conv" and r.name.startswith("center.")
        )
        enc0_convs = sum(1 for r in rows if r.kind == "conv" and r.name.startswith("enc0."))
        return NetworkSummary(
            rows=rows,
            total_params=total,
            downsample_factor=cfg.downsample_factor,
            center_conv_count=center_convs,
            encoder_convs_per_block=enc0_convs,
            decoder_block_count=depth,
        )


def build(config: NetworkConfig, seed: int = 0) -> SegETNetwork:
    """Instantiate the network with deterministic He-scaled weights."""
    return SegETNetwork(config, seed)


def probe_center_branches(net: SegETNetwork, spatial: int = 33) -> list[tuple[int, int, int]]:
    """Receptive-field probe: feed a unit impulse through each center branch
    with an all-ones kernel (BN bypassed, no activation) and report
    (dilation_rate, support_h, support_w) of the nonzero response."""
    results = []
    for branch in net.center_branches:
        spec = branch.spec
        x = np.zeros((1, spec.in_channels, spatial, spatial), dtype=np.float64)
        x[0, 0, spatial // 2, spatial // 2] = 1.0
        ones_kernel = Parameter(
            np.ones((spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)),
            "conv-kernel",
        )
        zero_bias = Parameter(np.zeros(spec.out_channels), "conv-bias")
        y, _ = ops.conv2d_forward(Tensor(x), spec, ones_kernel, zero_bias)
        nz = np.nonzero(np.abs(y.data[0, 0]) > 0)
        support_h = int(nz[0].max() - nz[0].min() + 1) if nz[0].size else 0
        support_w = int(nz[1].max() - nz[1].min() + 1) if nz[1].size else 0
        results.append((spec.dilation, support_h, support_w))
    return results
