from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

from v2ir.datapipe import MixSpec
from v2ir.models import GENERATOR_KINDS, Z_MODES, DiscriminatorSpec, GeneratorSpec, layer_plan
from v2ir.objectives import LossWeights
from v2ir.utils import ConfigError, asset_path, parse_bool, parse_list, read_key_value_file

ALGORITHMS = ("cgan", "cyclegan")
SPLITS = ("in_condition", "cross_time", "cross_time_and_background")


@dataclass
class TrainConfig:
    algorithm: str = "cgan"
    lr_d: float = 0.005
    lr_g: float = 0.005
    weights: LossWeights = field(default_factory=LossWeights)
    batch: int = 4
    max_epochs: int = 10000
    seed: int = 0
    z_mode: Optional[str] = None
    image_size: int = 64
    window: int = 50
    tau: float = 1e-3
    generator_kind: Optional[str] = None
    base_width: int = 16
    depth: int = 4
    res_blocks: int = 3
    disc_widths: List[int] = field(default_factory=lambda: [32, 64, 128])
    # False writes zeros to the seconds column so run.csv is byte-reproducible
    record_wall_time: bool = True
    progress: bool = False

    def __post_init__(self):
        self.disc_widths = [int(w) for w in self.disc_widths]
        self.validate_algorithm()
        self.validate_rates()
        self.validate_loop()
        self.validate_architecture()

    def validate_algorithm(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.z_mode is not None and self.z_mode not in Z_MODES:
            raise ValueError(f"z_mode must be one of {Z_MODES}")
        if self.algorithm == "cyclegan" and self.z_mode == "channel":
            raise ValueError("cyclegan generators take no z, use z_mode = none")
        if not isinstance(self.weights, LossWeights):
            raise ValueError("weights must be a LossWeights instance")

    def validate_rates(self):
        if not (self.lr_d > 0 and self.lr_g > 0):
            raise ValueError("learning rates must be positive")

    def validate_loop(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.window < 2:
            raise ValueError("convergence window must be >= 2")
        if self.tau < 0:
            raise ValueError("convergence tolerance must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    def validate_architecture(self):
        if self.generator_kind is not None and self.generator_kind not in GENERATOR_KINDS:
            raise ValueError(f"generator_kind must be one of {GENERATOR_KINDS}")
        if min(self.base_width, self.depth, self.image_size) < 1 or self.res_blocks < 0:
            raise ValueError("architecture sizes must be positive")
        if not self.disc_widths or min(self.disc_widths) < 1:
            raise ValueError("disc_widths must be a non-empty list of positive ints")
        divisor = self.generator_spec().divisor
        if self.image_size % divisor:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by {divisor} "
                f"as the {self.resolved_generator_kind} generator requires"
            )
        extent = self.image_size
        for layer in layer_plan(self.discriminator_spec(conditional=True)):
            extent = (extent + 2 * layer.pad - layer.kernel) // layer.stride + 1
        if extent < 1:
            raise ValueError(f"image_size {self.image_size} is too small for the discriminator")

    @property
    def resolved_z_mode(self):
        if self.z_mode is not None:
            return self.z_mode
        return "channel" if self.algorithm == "cgan" else "none"

    @property
    def resolved_generator_kind(self):
        if self.generator_kind is not None:
            return self.generator_kind
        return "unet" if self.algorithm == "cgan" else "resnet"

    def update_fields(self, **kwargs):
        """
        Update fields in place and re-validate everything.
        """
        for key, value in kwargs.items():
            if not hasattr(self, key):
                raise ValueError(f"unknown TrainConfig field {key!r}")
            setattr(self, key, value)
        self.__post_init__()
        return self

    def generator_spec(self, in_channels=3, out_channels=1):
        z_mode = self.resolved_z_mode
        return GeneratorSpec(
            kind=self.resolved_generator_kind,
            in_channels=in_channels,
            out_channels=out_channels,
            base_width=self.base_width,
            depth=self.depth,
            res_blocks=self.res_blocks,
            z_mode=z_mode,
        )

    def discriminator_spec(self, conditional, y_channels=1, x_channels=3):
        return DiscriminatorSpec(
            conditional=conditional,
            y_channels=y_channels,
            x_channels=x_channels,
            widths=tuple(self.disc_widths),
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        payload = dict(payload)
        weights = LossWeights(**payload.pop("weights", {}))
        return cls(weights=weights, **payload)

    @classmethod
    def from_entries(cls, entries, source="<config>"):
        """
        Build a config from raw ``key -> text`` entries, as read from a file.

        Loss weight keys (``lambda_l1``, ``lambda_cyc``, ``g_adv_mode``) sit
        next to the plain fields. Unknown keys raise ConfigError.
        """
        fields, weights = {}, {}
        for key, text in entries.items():
            if key in _WEIGHT_PARSERS:
                target, parse = weights, _WEIGHT_PARSERS[key]
            elif key in _FIELD_PARSERS:
                target, parse = fields, _FIELD_PARSERS[key]
            else:
                raise ConfigError(f"{source}: unknown config key {key!r}")
            try:
                target[key] = parse(text)
            except (ValueError, ConfigError) as e:
                raise ConfigError(f"{source}: bad value for {key!r}: {text!r}") from e
        try:
            return cls(weights=LossWeights(**weights), **fields)
        except ValueError as e:
            raise ConfigError(f"{source}: {e}") from e

    @classmethod
    def from_file(cls, path):
        return cls.from_entries(read_key_value_file(path), source=str(path))


def _optional(text):
    text = text.strip()
    return None if text == "auto" else text


_FIELD_PARSERS = {
    "algorithm": str.strip,
    "lr_d": float,
    "lr_g": float,
    "batch": int,
    "max_epochs": int,
    "seed": int,
    "z_mode": _optional,
    "image_size": int,
    "window": int,
    "tau": float,
    "generator_kind": _optional,
    "base_width": int,
    "depth": int,
    "res_blocks": int,
    "disc_widths": lambda text: list(parse_list(text, int)),
    "record_wall_time": parse_bool,
    "progress": parse_bool,
}
_WEIGHT_PARSERS = {"lambda_l1": float, "lambda_cyc": float, "g_adv_mode": str.strip}


def _parse_mix(text):
    real, sep, synth = text.partition(":")
    if not sep:
        raise ValueError(f"mix must look like n_real:n_synth, got {text!r}")
    return MixSpec(int(real), int(synth))


@dataclass
class SweepSpec:
    mixes: List[MixSpec] = field(
        default_factory=lambda: [MixSpec(20, 0), MixSpec(10, 10), MixSpec(10, 100)]
    )
    splits: List[str] = field(default_factory=lambda: list(SPLITS))
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    algorithm: str = "cgan"
    train: TrainConfig = field(default_factory=TrainConfig)
    test_size: int = 16
    home_time: str = "day"
    home_background: int = 0
    grid_samples: int = 2

    def __post_init__(self):
        self.validate_cells()
        self.validate_protocol()
        if self.train.algorithm != self.algorithm:
            self.train = replace(self.train, algorithm=self.algorithm)

    def validate_cells(self):
        if not self.mixes or not self.splits or not self.seeds:
            raise ValueError("a sweep needs at least one mix, one split and one seed")
        if not all(isinstance(m, MixSpec) for m in self.mixes):
            raise ValueError("mixes must be MixSpec instances")
        invalid = set(self.splits) - set(SPLITS)
        if invalid:
            raise ValueError(f"unknown splits {sorted(invalid)}, valid options are {SPLITS}")
        if len(set(self.splits)) != len(self.splits):
            raise ValueError("splits must not repeat")

    def validate_protocol(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.home_time not in ("day", "night"):
            raise ValueError("home_time must be day or night")
        if self.home_background < 0:
            raise ValueError("home_background must be >= 0")
        if self.test_size < 1:
            raise ValueError("test_size must be >= 1")
        if self.grid_samples < 0:
            raise ValueError("grid_samples must be >= 0")

    @property
    def max_real(self):
        return max(m.n_real for m in self.mixes)

    @property
    def max_synth(self):
        return max(m.n_synth for m in self.mixes)

    @classmethod
    def from_entries(cls, entries, source="<sweep>"):
        fields, train_entries = {}, {}
        for key, text in entries.items():
            if key.startswith("train."):
                train_entries[key[len("train.") :]] = text
                continue
            if key not in _SWEEP_PARSERS:
                raise ConfigError(f"{source}: unknown sweep key {key!r}")
            try:
                fields[key] = _SWEEP_PARSERS[key](text)
            except ValueError as e:
                raise ConfigError(f"{source}: bad value for {key!r}: {text!r}") from e
        if "algorithm" in fields:
            train_entries.setdefault("algorithm", fields["algorithm"])
        train = TrainConfig.from_entries(train_entries, source=f"{source} [train]")
        try:
            return cls(train=train, **fields)
        except ValueError as e:
            raise ConfigError(f"{source}: {e}") from e

    @classmethod
    def from_file(cls, path):
        return cls.from_entries(read_key_value_file(path), source=str(path))

    @classmethod
    def default(cls):
        return cls.from_file(asset_path("default_sweep.txt"))


_SWEEP_PARSERS = {
    "mixes": lambda text: list(parse_list(text, _parse_mix)),
    "splits": lambda text: list(parse_list(text)),
    "seeds": lambda text: list(parse_list(text, int)),
    "algorithm": str.strip,
    "test_size": int,
    "home_time": str.strip,
    "home_background": int,
    "grid_samples": int,
}
