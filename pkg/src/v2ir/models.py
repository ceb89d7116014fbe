"""
Generator and discriminator builders and their forward passes.

Every network is described by a flat layer plan (``layer_plan``); building a
model draws one set of parameters per planned layer and the forward passes
walk the same plan, so the parameter count is a pure function of ``spec``.
"""

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from v2ir.numerics import (
    ParamStore,
    Rng,
    Tensor,
    activation,
    concat,
    conv2d,
    conv_transpose2d,
    gaussian_init,
    instance_norm,
)

INIT_STD = 0.02
LEAKY_SLOPE = 0.2
GENERATOR_KINDS = ("unet", "resnet")
Z_MODES = ("none", "channel")


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "unet"
    in_channels: int = 3
    out_channels: int = 1
    base_width: int = 16
    depth: int = 4
    res_blocks: int = 3
    z_mode: str = "none"
    z_channels: int = 1

    def __post_init__(self):
        self.validate_kind()
        self.validate_channels()
        self.validate_z_mode()

    def validate_kind(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"generator kind must be one of {GENERATOR_KINDS}")
        if self.kind == "unet" and self.depth < 1:
            raise ValueError("unet depth must be >= 1")
        if self.kind == "resnet" and self.res_blocks < 0:
            raise ValueError("resnet res_blocks must be >= 0")

    def validate_channels(self):
        for name in ("in_channels", "out_channels", "base_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive int")

    def validate_z_mode(self):
        if self.z_mode not in Z_MODES:
            raise ValueError(f"z_mode must be one of {Z_MODES}")
        if self.z_mode == "channel" and self.z_channels < 1:
            raise ValueError("z_channels must be >= 1 when z_mode is 'channel'")

    @property
    def input_channels(self):
        extra = self.z_channels if self.z_mode == "channel" else 0
        return self.in_channels + extra

    @property
    def divisor(self):
        """Spatial extents of the input must be multiples of this."""
        return 2**self.depth if self.kind == "unet" else 4


@dataclass(frozen=True)
class DiscriminatorSpec:
    conditional: bool = True
    y_channels: int = 1
    x_channels: int = 3
    widths: tuple = (32, 64, 128)
    strides: tuple = (2, 2, 2, 1)
    kernel: int = 4
    pad: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError("discriminator widths must be positive ints")
        if not self.strides or any(s < 1 for s in self.strides):
            raise ValueError("discriminator strides must be positive ints")
        if self.y_channels < 1 or (self.conditional and self.x_channels < 1):
            raise ValueError("discriminator channel counts must be positive")

    @property
    def input_channels(self):
        return self.y_channels + (self.x_channels if self.conditional else 0)

    def width_at(self, index):
        return self.widths[min(index, len(self.widths) - 1)]


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "conv_t"
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    pad: int
    norm: bool = False
    act: Optional[str] = None

    @property
    def weight_shape(self):
        if self.kind == "conv":
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        return (self.in_channels, self.out_channels, self.kernel, self.kernel)

    def num_parameters(self):
        count = self.in_channels * self.out_channels * self.kernel**2 + self.out_channels
        if self.norm:
            count += 2 * self.out_channels
        return count


def _unet_width(spec, level):
    return spec.base_width * 2 ** min(level - 1, 3)


def _unet_plan(spec):
    plan = []
    in_ch = spec.input_channels
    for level in range(1, spec.depth + 1):
        out_ch = _unet_width(spec, level)
        plan.append(
            LayerSpec(f"enc{level}", "conv", in_ch, out_ch, 4, 2, 1, level > 1, "leaky_relu")
        )
        in_ch = out_ch
    for level in range(spec.depth, 0, -1):
        if level < spec.depth:
            in_ch += _unet_width(spec, level)
        if level > 1:
            out_ch, norm, act = _unet_width(spec, level - 1), True, "relu"
        else:
            out_ch, norm, act = spec.out_channels, False, "tanh"
        plan.append(LayerSpec(f"dec{level}", "conv_t", in_ch, out_ch, 4, 2, 1, norm, act))
        in_ch = out_ch
    return plan


def _resnet_plan(spec):
    w = spec.base_width
    plan = [
        LayerSpec("stem", "conv", spec.input_channels, w, 3, 1, 1, True, "leaky_relu"),
        LayerSpec("down1", "conv", w, 2 * w, 4, 2, 1, True, "leaky_relu"),
        LayerSpec("down2", "conv", 2 * w, 4 * w, 4, 2, 1, True, "leaky_relu"),
    ]
    for block in range(1, spec.res_blocks + 1):
        plan.append(LayerSpec(f"res{block}a", "conv", 4 * w, 4 * w, 3, 1, 1, True, "relu"))
        plan.append(LayerSpec(f"res{block}b", "conv", 4 * w, 4 * w, 3, 1, 1, True, None))
    plan += [
        LayerSpec("up1", "conv_t", 4 * w, 2 * w, 4, 2, 1, True, "relu"),
        LayerSpec("up2", "conv_t", 2 * w, w, 4, 2, 1, True, "relu"),
        LayerSpec("head", "conv", w, spec.out_channels, 3, 1, 1, False, "tanh"),
    ]
    return plan


def _discriminator_plan(spec):
    plan = []
    in_ch = spec.input_channels
    for index, stride in enumerate(spec.strides):
        out_ch = spec.width_at(index)
        plan.append(
            LayerSpec(
                f"layer{index + 1}",
                "conv",
                in_ch,
                out_ch,
                spec.kernel,
                stride,
                spec.pad,
                index > 0,
                "leaky_relu",
            )
        )
        in_ch = out_ch
    plan.append(LayerSpec("head", "conv", in_ch, 1, spec.kernel, 1, spec.pad, False, "sigmoid"))
    return plan


def layer_plan(spec):
    """Ordered list of LayerSpec for a generator or discriminator spec."""
    if isinstance(spec, DiscriminatorSpec):
        return _discriminator_plan(spec)
    if isinstance(spec, GeneratorSpec):
        return _unet_plan(spec) if spec.kind == "unet" else _resnet_plan(spec)
    raise TypeError(f"not a model spec: {type(spec).__name__}")


def count_parameters(spec):
    return sum(layer.num_parameters() for layer in layer_plan(spec))


@dataclass
class Model:
    spec: object
    params: ParamStore
    plan: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.plan:
            self.plan = layer_plan(self.spec)
        self._layers = {layer.name: layer for layer in self.plan}

    @property
    def is_generator(self):
        return isinstance(self.spec, GeneratorSpec)

    def layer(self, name):
        return self._layers[name]

    def num_parameters(self):
        return self.params.num_parameters()


def parameter_shapes(spec):
    """(name, shape) of every parameter, in ParamStore order."""
    shapes = []
    for layer in layer_plan(spec):
        shapes.append((f"{layer.name}.weight", layer.weight_shape))
        shapes.append((f"{layer.name}.bias", (layer.out_channels,)))
        if layer.norm:
            shapes.append((f"{layer.name}.gamma", (layer.out_channels,)))
            shapes.append((f"{layer.name}.beta", (layer.out_channels,)))
    return shapes


def _build(spec, rng):
    params = ParamStore()
    plan = layer_plan(spec)
    for layer in plan:
        layer_rng = rng.child(layer.name)
        params.add(f"{layer.name}.weight", gaussian_init(layer.weight_shape, 0.0, INIT_STD, layer_rng))
        params.add(f"{layer.name}.bias", Tensor(np.zeros(layer.out_channels)))
        if layer.norm:
            params.add(
                f"{layer.name}.gamma", gaussian_init((layer.out_channels,), 1.0, INIT_STD, layer_rng)
            )
            params.add(f"{layer.name}.beta", Tensor(np.zeros(layer.out_channels)))
    return Model(spec=spec, params=params, plan=plan)


def check_divisible(spec, height, width):
    if height % spec.divisor or width % spec.divisor:
        raise ValueError(
            f"{spec.kind} generator needs extents divisible by {spec.divisor}, "
            f"got {height}x{width}"
        )


def build_generator(spec, rng, image_size=None):
    """
    Build a unet or resnet generator with conv weights drawn from N(0, 0.02).

    When ``image_size`` is given it is checked against ``spec``'s
    divisibility requirement up front.
    """
    if image_size is not None:
        check_divisible(spec, image_size, image_size)
    return _build(spec, rng)


def build_discriminator(spec, rng):
    return _build(spec, rng)


def apply_layer(model, layer, h):
    params = model.params
    weight, bias = params[f"{layer.name}.weight"], params[f"{layer.name}.bias"]
    if layer.kind == "conv":
        h = conv2d(h, weight, bias, layer.stride, layer.pad)
    else:
        h = conv_transpose2d(h, weight, bias, layer.stride, layer.pad)
    if layer.norm:
        h = instance_norm(h, params[f"{layer.name}.gamma"], params[f"{layer.name}.beta"])
    if layer.act is not None:
        h = activation(h, layer.act, alpha=LEAKY_SLOPE)
    return h


def sample_z(spec, batch, height, width, rng):
    """Unit-Gaussian noise channels for a z_mode='channel' generator, else None."""
    if spec.z_mode != "channel":
        return None
    return Tensor(rng.normal(0.0, 1.0, (batch, spec.z_channels, height, width)))


def _generator_input(spec, x, z):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"generator expects NCHW input with {spec.in_channels} channels")
    check_divisible(spec, x.shape[2], x.shape[3])
    if spec.z_mode == "none":
        if z is not None:
            raise ValueError("z given to a generator with z_mode='none'")
        return x
    if z is None:
        raise ValueError("generator with z_mode='channel' needs z")
    expected = (x.shape[0], spec.z_channels, x.shape[2], x.shape[3])
    if z.shape != expected:
        raise ValueError(f"z must have shape {expected}, got {z.shape}")
    return concat([x, z], axis=1)


def generator_forward(g, x, z=None):
    spec = g.spec
    h = _generator_input(spec, x, z)
    if spec.kind == "unet":
        skips = []
        for level in range(1, spec.depth + 1):
            h = apply_layer(g, g.layer(f"enc{level}"), h)
            skips.append(h)
        for level in range(spec.depth, 0, -1):
            if level < spec.depth:
                h = concat([h, skips[level - 1]], axis=1)
            h = apply_layer(g, g.layer(f"dec{level}"), h)
        return h

    for name in ("stem", "down1", "down2"):
        h = apply_layer(g, g.layer(name), h)
    for block in range(1, spec.res_blocks + 1):
        r = apply_layer(g, g.layer(f"res{block}a"), h)
        r = apply_layer(g, g.layer(f"res{block}b"), r)
        h = h + r
    for name in ("up1", "up2", "head"):
        h = apply_layer(g, g.layer(name), h)
    return h


def discriminator_forward(d, y, x=None):
    """Patch map of real-probabilities for ``y`` (conditioned on ``x`` if required)."""
    spec = d.spec
    if y.ndim != 4 or y.shape[1] != spec.y_channels:
        raise ValueError(f"discriminator expects y with {spec.y_channels} channels")
    if spec.conditional:
        if x is None:
            raise ValueError("conditional discriminator needs x")
        if x.shape[1] != spec.x_channels or x.shape[2:] != y.shape[2:]:
            raise ValueError("x must match y spatially and have x_channels channels")
        h = concat([y, x], axis=1)
    else:
        if x is not None:
            raise ValueError("unconditional discriminator takes no x")
        h = y
    for layer in d.plan:
        h = apply_layer(d, layer, h)
    return h


def spec_to_dict(spec):
    role = "generator" if isinstance(spec, GeneratorSpec) else "discriminator"
    payload = asdict(spec)
    for key, value in payload.items():
        if isinstance(value, tuple):
            payload[key] = list(value)
    return {"role": role, **payload}


def spec_from_dict(payload):
    payload = dict(payload)
    role = payload.pop("role")
    if role == "generator":
        return GeneratorSpec(**payload)
    if role == "discriminator":
        return DiscriminatorSpec(**payload)
    raise ValueError(f"unknown model role {role!r}")
