"""The convolutional light-field network.

A channel-mixing 1x1-conv backbone runs at ray-grid resolution, then a
chain of super-resolution stages upsamples 2x or 3x each via transposed
convolutions, and a sigmoid head emits RGB.  Every conv is followed by
batch normalization and an activation (configurable for ablations); skip
connections wrap each residual block.

All layer shapes derive from a NetConfig, so the whole ablation space
(depth, width, SR channel plans, blocks per SR stage) builds from data.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .tensor import Parameter, ShapeError, Tensor4

_ACTIVATIONS = ("gelu", "relu", "none")

# transposed-conv geometry per upsample factor: kernel, stride, padding
_SR_GEOMETRY = {2: (4, 2, 1), 3: (3, 3, 0)}


@dataclass(frozen=True)
class SRStageSpec:
    factor: int
    out_channels: int

    def __post_init__(self):
        if self.factor not in _SR_GEOMETRY:
            raise ValueError(f"SR factor must be 2 or 3, got {self.factor}")
        if self.out_channels < 1:
            raise ValueError(f"SR out_channels must be positive, got {self.out_channels}")


@dataclass(frozen=True)
class NetConfig:
    """Complete architectural description of one model variant."""

    in_channels: int
    width: int
    n_res_blocks: int
    sr_plan: Tuple[SRStageSpec, ...]
    rb_per_sr: int = 2
    activation: str = "gelu"
    use_norm: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.width < 1:
            raise ValueError("in_channels and width must be positive")
        if self.n_res_blocks < 0:
            raise ValueError(f"n_res_blocks must be >= 0, got {self.n_res_blocks}")
        if self.rb_per_sr < 1:
            raise ValueError(f"rb_per_sr must be >= 1, got {self.rb_per_sr}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}")
        object.__setattr__(self, "sr_plan", tuple(self.sr_plan))

    @property
    def upsample_factor(self) -> int:
        f = 1
        for s in self.sr_plan:
            f *= s.factor
        return f

    @property
    def out_channels_final(self) -> int:
        return self.sr_plan[-1].out_channels if self.sr_plan else self.width

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "width": self.width,
            "n_res_blocks": self.n_res_blocks,
            "sr_plan": [[s.factor, s.out_channels] for s in self.sr_plan],
            "rb_per_sr": self.rb_per_sr,
            "activation": self.activation,
            "use_norm": self.use_norm,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetConfig":
        return NetConfig(
            in_channels=int(d["in_channels"]),
            width=int(d["width"]),
            n_res_blocks=int(d["n_res_blocks"]),
            sr_plan=tuple(SRStageSpec(int(f), int(c)) for f, c in d["sr_plan"]),
            rb_per_sr=int(d["rb_per_sr"]),
            activation=d["activation"],
            use_norm=bool(d["use_norm"]),
        )


def _activate(x: Tensor4, kind: str) -> Tensor4:
    if kind == "gelu":
        return ops.gelu(x)
    if kind == "relu":
        return ops.relu(x)
    return x


class _ConvUnit:
    """conv1x1 (or transposed conv) -> optional batchnorm -> activation."""

    def __init__(
        self,
        name: str,
        cin: int,
        cout: int,
        activation: str,
        use_norm: bool,
        rng: np.random.Generator,
        dtype,
        sr_factor: Optional[int] = None,
    ):
        self.name = name
        self.activation = activation
        self.sr_factor = sr_factor
        if sr_factor is None:
            bound = np.sqrt(6.0 / cin)
            wshape: Tuple[int, ...] = (cout, cin)
        else:
            k, self.stride, self.padding = _SR_GEOMETRY[sr_factor]
            bound = np.sqrt(6.0 / (cin * k * k))
            wshape = (cin, cout, k, k)
        self.weight = Parameter(
            rng.uniform(-bound, bound, size=wshape).astype(dtype), f"{name}.weight"
        )
        self.bias = Parameter(np.zeros(cout, dtype=dtype), f"{name}.bias")
        self.use_norm = use_norm
        if use_norm:
            self.norm_scale = Parameter(np.ones(cout, dtype=dtype), f"{name}.norm_scale")
            self.norm_shift = Parameter(np.zeros(cout, dtype=dtype), f"{name}.norm_shift")
            # running stats share the parameter dtype so weight files
            # round-trip exactly through their float32 records
            self.running_mean = np.zeros(cout, dtype=dtype)
            self.running_var = np.ones(cout, dtype=dtype)

    def forward(self, x: Tensor4, mode: str) -> Tensor4:
        if self.sr_factor is None:
            y = ops.conv1x1(x, self.weight, self.bias)
        else:
            y = ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)
        if self.use_norm:
            y = ops.batchnorm2d(
                y, self.norm_scale, self.norm_shift, self.running_mean, self.running_var, mode
            )
        return _activate(y, self.activation)

    def params(self) -> List[Parameter]:
        ps = [self.weight, self.bias]
        if self.use_norm:
            ps += [self.norm_scale, self.norm_shift]
        return ps

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        if not self.use_norm:
            return []
        return [
            (f"{self.name}.running_mean", self.running_mean),
            (f"{self.name}.running_var", self.running_var),
        ]


class _ResidualBlock:
    """Two conv units with a skip from block input to block output."""

    def __init__(self, name, width, activation, use_norm, rng, dtype):
        self.conv1 = _ConvUnit(f"{name}.conv1", width, width, activation, use_norm, rng, dtype)
        self.conv2 = _ConvUnit(f"{name}.conv2", width, width, activation, use_norm, rng, dtype)

    def forward(self, x: Tensor4, mode: str) -> Tensor4:
        return ops.residual_add(x, self.conv2.forward(self.conv1.forward(x, mode), mode))

    def units(self) -> Iterator[_ConvUnit]:
        yield self.conv1
        yield self.conv2


class _SRStage:
    """Upsampling stage: a transposed-conv block with a skip over its two
    1x1 convs, then rb_per_sr - 1 plain residual blocks."""

    def __init__(self, name, cin, spec: SRStageSpec, rb_per_sr, activation, use_norm, rng, dtype):
        cout = spec.out_channels
        self.up = _ConvUnit(
            f"{name}.up", cin, cout, activation, use_norm, rng, dtype, sr_factor=spec.factor
        )
        self.mix1 = _ConvUnit(f"{name}.mix1", cout, cout, activation, use_norm, rng, dtype)
        self.mix2 = _ConvUnit(f"{name}.mix2", cout, cout, activation, use_norm, rng, dtype)
        self.blocks = [
            _ResidualBlock(f"{name}.rb{j}", cout, activation, use_norm, rng, dtype)
            for j in range(rb_per_sr - 1)
        ]

    def forward(self, x: Tensor4, mode: str) -> Tensor4:
        t = self.up.forward(x, mode)
        y = ops.residual_add(t, self.mix2.forward(self.mix1.forward(t, mode), mode))
        for b in self.blocks:
            y = b.forward(y, mode)
        return y

    def units(self) -> Iterator[_ConvUnit]:
        yield self.up
        yield self.mix1
        yield self.mix2
        for b in self.blocks:
            yield from b.units()


class Model:
    """Built network: stem, residual backbone, tail, SR chain, sigmoid head."""

    def __init__(self, config: NetConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.folded = False
        rng = np.random.default_rng(seed)
        act, norm = config.activation, config.use_norm
        self.stem = _ConvUnit("stem", config.in_channels, config.width, act, norm, rng, dtype)
        self.backbone = [
            _ResidualBlock(f"backbone.{i}", config.width, act, norm, rng, dtype)
            for i in range(config.n_res_blocks)
        ]
        self.tail = _ConvUnit("tail", config.width, config.width, act, norm, rng, dtype)
        self.sr_stages = []
        cin = config.width
        for i, spec in enumerate(config.sr_plan):
            self.sr_stages.append(
                _SRStage(f"sr.{i}", cin, spec, config.rb_per_sr, act, norm, rng, dtype)
            )
            cin = spec.out_channels
        bound = np.sqrt(6.0 / cin)
        self.head_weight = Parameter(
            rng.uniform(-bound, bound, size=(3, cin)).astype(dtype), "head.weight"
        )
        self.head_bias = Parameter(np.zeros(3, dtype=dtype), "head.bias")

    def forward(self, x: Tensor4, mode: str = "eval") -> Tensor4:
        if mode not in ("train", "eval"):
            raise ValueError(f"forward mode must be 'train' or 'eval', got {mode!r}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"model expects {self.config.in_channels} input channels, got {x.shape[1]}"
            )
        y = self.stem.forward(x, mode)
        for b in self.backbone:
            y = b.forward(y, mode)
        y = self.tail.forward(y, mode)
        for s in self.sr_stages:
            y = s.forward(y, mode)
        return ops.sigmoid(ops.conv1x1(y, self.head_weight, self.head_bias))

    def units(self) -> Iterator[_ConvUnit]:
        yield self.stem
        for b in self.backbone:
            yield from b.units()
        yield self.tail
        for s in self.sr_stages:
            yield from s.units()

    def params(self) -> List[Parameter]:
        ps: List[Parameter] = []
        for u in self.units():
            ps += u.params()
        ps += [self.head_weight, self.head_bias]
        return ps

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        bs: List[Tuple[str, np.ndarray]] = []
        for u in self.units():
            bs += u.buffers()
        return bs


def build_model(config: NetConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Construct a model with deterministic uniform fan-in initialization."""
    return Model(config, seed=seed, dtype=dtype)


def count_params(model: Model) -> int:
    """Trainable parameter elements (normalization running stats excluded)."""
    return sum(p.value.size for p in model.params())


def fold_batchnorm(model: Model) -> Model:
    """Absorb each conv's normalization statistics into its weights.

    Returns a norm-free model whose eval forward matches the original
    within float roundoff.  Rejects models without normalization (and
    hence already-folded ones).
    """
    if not model.config.use_norm or model.folded:
        raise ValueError("model has no normalization layers to fold")
    folded_cfg = replace(model.config, use_norm=False)
    out = Model(folded_cfg, seed=0, dtype=model.head_weight.value.dtype)
    out.folded = True
    eps = 1e-5
    for src, dst in zip(model.units(), out.units()):
        if src.running_mean is None or src.running_var is None:
            raise ValueError(f"unit {src.name} has uninitialized normalization statistics")
        gamma = src.norm_scale.value.astype(np.float64)
        beta = src.norm_shift.value.astype(np.float64)
        inv_std = gamma / np.sqrt(src.running_var + eps)
        w = src.weight.value.astype(np.float64)
        b = src.bias.value.astype(np.float64)
        if src.sr_factor is None:
            wf = w * inv_std[:, None]  # scale output rows
        else:
            wf = w * inv_std[None, :, None, None]  # (cin, cout, k, k): scale cout axis
        bf = (b - src.running_mean) * inv_std + beta
        dst.weight.value[...] = wf.astype(dst.weight.value.dtype)
        dst.bias.value[...] = bf.astype(dst.bias.value.dtype)
    out.head_weight.value[...] = model.head_weight.value
    out.head_bias.value[...] = model.head_bias.value
    return out


# named presets ------------------------------------------------------------

_STANDARD_IN = 312  # 8 points per ray, 6 frequency bands


def _width_scaled_plan(width: int) -> Tuple[SRStageSpec, ...]:
    """Three 2x stages with channels tied to the backbone width (w/4, w/4, w/16)."""
    if width % 16:
        raise ValueError(f"width must be a multiple of 16 to derive SR channels, got {width}")
    return (
        SRStageSpec(2, width // 4),
        SRStageSpec(2, width // 4),
        SRStageSpec(2, width // 16),
    )


def width_config(width: int, in_channels: int = _STANDARD_IN, n_res_blocks: int = 28) -> NetConfig:
    """Backbone-width ablation point: SR channels scale with the width."""
    return NetConfig(
        in_channels=in_channels,
        width=width,
        n_res_blocks=n_res_blocks,
        sr_plan=_width_scaled_plan(width),
    )


_DEPTH_BLOCKS = {30: 13, 60: 28, 80: 38, 100: 48}


def depth_config(conv_layers: int, in_channels: int = _STANDARD_IN) -> NetConfig:
    """Backbone-depth ablation point, named by nominal conv-layer count."""
    if conv_layers not in _DEPTH_BLOCKS:
        raise ValueError(f"depth must be one of {sorted(_DEPTH_BLOCKS)}, got {conv_layers}")
    return NetConfig(
        in_channels=in_channels,
        width=256,
        n_res_blocks=_DEPTH_BLOCKS[conv_layers],
        sr_plan=_width_scaled_plan(256),
    )


def preset_config(name: str) -> NetConfig:
    if name == "d60-sr3-8x":
        return width_config(256)
    if name == "d60-sr3-12x":
        return NetConfig(
            in_channels=_STANDARD_IN,
            width=256,
            n_res_blocks=28,
            sr_plan=(SRStageSpec(2, 64), SRStageSpec(2, 64), SRStageSpec(3, 16)),
        )
    if name == "tiny":
        return NetConfig(
            in_channels=_STANDARD_IN,
            width=32,
            n_res_blocks=4,
            sr_plan=(SRStageSpec(2, 16), SRStageSpec(2, 16)),
        )
    raise ValueError(f"unknown preset {name!r}; choose d60-sr3-8x, d60-sr3-12x or tiny")


PRESET_NAMES = ("d60-sr3-8x", "d60-sr3-12x", "tiny")


def ablation_grid() -> dict:
    """Every architecture variant exercised by the ablation tables."""
    grid = {}
    for rb in (1, 2, 3, 4):
        grid[f"rb{rb}"] = replace(preset_config("d60-sr3-8x"), rb_per_sr=rb)
    for c2 in (16, 32, 64):
        grid[f"c{c2}"] = replace(
            preset_config("d60-sr3-8x"),
            sr_plan=(SRStageSpec(2, c2), SRStageSpec(2, c2), SRStageSpec(2, 16)),
        )
    for w in (64, 128, 256, 384, 512):
        grid[f"w{w}"] = width_config(w)
    for d in (30, 60, 80, 100):
        grid[f"d{d}"] = depth_config(d)
    return grid
