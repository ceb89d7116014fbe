"""
Procedural visible/IR scene renderer with exact target annotations, the
selective Gaussian blur post-filter, batch generation of synthetic and
real-analog datasets, and the on-disk dataset manifest.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit
from tqdm import tqdm

from v2ir.datapipe import FAMILIES, Dataset, Image, Sample, read_image, write_image
from v2ir.utils import FormatError, atomic_write_bytes, load_palettes, to_uint8

logger = logging.getLogger(__name__)

TIMES = ("day", "night")
VIEWPOINTS = ("overhead", "angled", "close", "far")
TARGET_CLASSES = ("person", "vehicle")
NUM_BACKGROUNDS = len(load_palettes()["terrains"])

VIEWPOINT_SCALE = {"close": 1.6, "angled": 1.0, "overhead": 0.8, "far": 0.5}
# (width range, height range) as fractions of the frame, before viewpoint scaling
BASE_SIZE = {
    "person": ((0.06, 0.10), (0.12, 0.20)),
    "vehicle": ((0.15, 0.25), (0.08, 0.14)),
}
TEMPERATURE_RANGE = {"person": (0.7, 0.9), "vehicle": (0.8, 1.0)}
MAX_TARGETS = 8

AMBIENT = {"day": 0.4, "night": 0.1}
BACKGROUND_TEMPERATURE = {"day": 0.2, "night": 0.05}
NIGHT_GAIN = 0.25
NIGHT_NOISE = 4.0

DEFAULT_BLUR_RADIUS = 5
DEFAULT_MAX_DELTA = 50
MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True)
class Condition:
    time_of_day: str = "day"
    viewpoint: str = "angled"
    background_class: int = 0

    def __post_init__(self):
        if self.time_of_day not in TIMES:
            raise ValueError(f"time_of_day must be one of {TIMES}")
        if self.viewpoint not in VIEWPOINTS:
            raise ValueError(f"viewpoint must be one of {VIEWPOINTS}")
        if int(self.background_class) < 0:
            raise ValueError("background_class must be >= 0")


def _uniform(values):
    return {value: 1.0 for value in values}


@dataclass
class ConditionMix:
    """Independent categorical weights over times, viewpoints and backgrounds."""

    times: dict = field(default_factory=lambda: _uniform(TIMES))
    viewpoints: dict = field(default_factory=lambda: _uniform(VIEWPOINTS))
    backgrounds: dict = field(default_factory=lambda: _uniform(range(NUM_BACKGROUNDS)))

    def __post_init__(self):
        self.validate_axis("times", TIMES)
        self.validate_axis("viewpoints", VIEWPOINTS)
        self.validate_axis("backgrounds", None)

    def validate_axis(self, name, allowed):
        weights = getattr(self, name)
        if not weights:
            raise ValueError(f"condition mix needs at least one entry in {name}")
        for key, weight in weights.items():
            if allowed is not None and key not in allowed:
                raise ValueError(f"unknown {name} entry {key!r}")
            if not math.isfinite(weight) or weight < 0:
                raise ValueError(f"{name} weights must be finite and >= 0")
        if sum(weights.values()) <= 0:
            raise ValueError(f"{name} weights must not all be zero")

    @classmethod
    def fixed(cls, condition):
        return cls(
            times={condition.time_of_day: 1.0},
            viewpoints={condition.viewpoint: 1.0},
            backgrounds={int(condition.background_class): 1.0},
        )

    @staticmethod
    def _pick(weights, rng):
        keys = list(weights)
        p = np.array([weights[key] for key in keys], dtype=np.float64)
        return keys[int(rng.choice(len(keys), None, True, p / p.sum()))]

    def draw(self, rng):
        return Condition(
            time_of_day=self._pick(self.times, rng),
            viewpoint=self._pick(self.viewpoints, rng),
            background_class=int(self._pick(self.backgrounds, rng)),
        )


@dataclass(frozen=True)
class Target:
    target_class: str
    center: tuple
    size: tuple
    heading: float
    temperature: float

    def __post_init__(self):
        if self.target_class not in TARGET_CLASSES:
            raise ValueError(f"target class must be one of {TARGET_CLASSES}")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError("target temperature must lie in [0, 1]")
        if min(self.size) <= 0:
            raise ValueError("target size must be positive")

    def intersects_frame(self):
        (cx, cy), (w, h) = self.center, self.size
        return cx + w / 2 >= 0 and cx - w / 2 <= 1 and cy + h / 2 >= 0 and cy - h / 2 <= 1


@dataclass(frozen=True)
class SceneSpec:
    background_class: int
    time_of_day: str
    viewpoint: str
    targets: tuple

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        Condition(self.time_of_day, self.viewpoint, self.background_class)
        if not 1 <= len(self.targets) <= MAX_TARGETS:
            raise ValueError(f"a scene holds 1 to {MAX_TARGETS} targets")
        if not all(target.intersects_frame() for target in self.targets):
            raise ValueError("every target must intersect the frame")

    @property
    def condition(self):
        return Condition(self.time_of_day, self.viewpoint, self.background_class)


@dataclass(frozen=True)
class RenderConfig:
    width: int = 64
    height: int = 64
    visible_channels: int = 3
    ir_channels: int = 1

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("render extents must be positive")


@dataclass(frozen=True)
class RenderStyle:
    name: str
    texture_octaves: int
    pixel_noise: float
    ir_noise: float
    thermal_texture: float
    blur: bool


SYNTHETIC_STYLE = RenderStyle("synthetic", 1, 3.0, 2.0, 0.0, True)
REAL_ANALOG_STYLE = RenderStyle("real_analog", 2, 6.0, 3.0, 0.04, False)
STYLES = {style.name: style for style in (SYNTHETIC_STYLE, REAL_ANALOG_STYLE)}


@dataclass(frozen=True)
class Annotation:
    """Inclusive pixel bounding box of one target."""

    target_class: str
    x0: int
    y0: int
    x1: int
    y1: int

    def contains(self, x, y):
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


def sample_scene(condition, rng):
    """Draw 1-4 targets with viewpoint-scaled sizes for the given condition."""
    scale = VIEWPOINT_SCALE[condition.viewpoint]
    targets = []
    for _ in range(int(rng.integers(1, 5))):
        kind = TARGET_CLASSES[int(rng.integers(0, len(TARGET_CLASSES)))]
        (w_lo, w_hi), (h_lo, h_hi) = BASE_SIZE[kind]
        width = rng.uniform(w_lo, w_hi) * scale
        height = rng.uniform(h_lo, h_hi) * scale
        center = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0))
        heading = rng.uniform(-math.pi, math.pi)
        temperature = rng.uniform(*TEMPERATURE_RANGE[kind])
        targets.append(Target(kind, center, (width, height), heading, temperature))
    return SceneSpec(
        background_class=int(condition.background_class),
        time_of_day=condition.time_of_day,
        viewpoint=condition.viewpoint,
        targets=tuple(targets),
    )


def _footprint(target, cfg):
    xs = (np.arange(cfg.width) + 0.5) / cfg.width
    ys = (np.arange(cfg.height) + 0.5) / cfg.height
    dx = xs[None, :] - target.center[0]
    dy = ys[:, None] - target.center[1]
    cos, sin = math.cos(target.heading), math.sin(target.heading)
    u = dx * cos + dy * sin
    v = -dx * sin + dy * cos
    half_w, half_h = target.size[0] / 2, target.size[1] / 2
    if target.target_class == "person":
        mask = (u / half_w) ** 2 + (v / half_h) ** 2 <= 1.0
    else:
        mask = (np.abs(u) <= half_w) & (np.abs(v) <= half_h)
    col = min(max(int(math.floor(target.center[0] * cfg.width)), 0), cfg.width - 1)
    row = min(max(int(math.floor(target.center[1] * cfg.height)), 0), cfg.height - 1)
    mask[row, col] = True
    return mask


def footprint_masks(scene, cfg):
    """
    Per-target boolean (H, W) footprints, in scene order.

    Targets are painted in this order, so a later target covers an earlier
    one where their footprints overlap.
    """
    return [_footprint(target, cfg) for target in scene.targets]


def coverage_map(scene, cfg):
    """Index of the target covering each pixel, -1 for background."""
    cover = np.full((cfg.height, cfg.width), -1, dtype=np.int64)
    for index, mask in enumerate(footprint_masks(scene, cfg)):
        cover[mask] = index
    return cover


def _smooth_field(shape, octaves, rng):
    out = np.zeros(shape, dtype=np.float64)
    for octave in range(octaves):
        sigma = max(shape) / (8.0 * 2**octave)
        layer = gaussian_filter(rng.normal(0.0, 1.0, shape), sigma, mode="wrap")
        spread = layer.std()
        if spread > 0:
            layer = (layer - layer.mean()) / spread
        out += layer * 0.5**octave
    return out


def render_visible(scene, cfg, rng, style=SYNTHETIC_STYLE, draw_targets=True):
    """
    Render the 3-channel visible image of a scene.

    The terrain is a low-frequency texture blended between the background
    class palette's dark and light colours. Targets are filled with a colour
    from their class palette. Random streams are split per concern, so
    ``draw_targets=False`` changes pixels inside the target footprints only.
    """
    palettes = load_palettes()
    terrain = palettes["terrains"][scene.background_class % len(palettes["terrains"])]
    dark = np.array(terrain["dark"], dtype=np.float64)
    light = np.array(terrain["light"], dtype=np.float64)
    shape = (cfg.height, cfg.width)

    texture = _smooth_field(
        shape, style.texture_octaves, rng.child(f"texture/{scene.background_class}")
    )
    rgb = dark + expit(texture)[:, :, None] * (light - dark)

    if draw_targets:
        paint = rng.child("paint")
        for target, mask in zip(scene.targets, footprint_masks(scene, cfg)):
            colours = palettes["targets"][target.target_class]
            colour = np.array(colours[int(paint.integers(0, len(colours)))], dtype=np.float64)
            rgb[mask] = colour * paint.uniform(0.85, 1.15)

    rgb = rgb + rng.child("noise").normal(0.0, style.pixel_noise, rgb.shape)
    if scene.time_of_day == "night":
        rgb = rgb * NIGHT_GAIN + rng.child("night").normal(0.0, NIGHT_NOISE, rgb.shape)
    return Image(to_uint8(rgb))


def render_ir(scene, cfg, rng, style=SYNTHETIC_STYLE):
    """
    Render the 1-channel IR image from per-pixel temperatures.

    Intensity is ``255 * (0.15 * ambient + 0.85 * T)`` plus sensor noise,
    with ``T`` the background temperature of the time of day or the
    temperature of the covering target.
    """
    shape = (cfg.height, cfg.width)
    temperature = np.full(shape, BACKGROUND_TEMPERATURE[scene.time_of_day])
    if style.thermal_texture > 0:
        temperature += style.thermal_texture * np.tanh(
            _smooth_field(shape, style.texture_octaves, rng.child("thermal"))
        )
    for target, mask in zip(scene.targets, footprint_masks(scene, cfg)):
        temperature[mask] = target.temperature
    intensity = 255.0 * (0.15 * AMBIENT[scene.time_of_day] + 0.85 * temperature)
    intensity = intensity + rng.child("noise").normal(0.0, style.ir_noise, shape)
    return Image(to_uint8(intensity))


def annotations(scene, cfg):
    boxes = []
    for target, mask in zip(scene.targets, footprint_masks(scene, cfg)):
        rows, cols = np.nonzero(mask)
        boxes.append(
            Annotation(
                target.target_class,
                int(cols.min()),
                int(rows.min()),
                int(cols.max()),
                int(rows.max()),
            )
        )
    return boxes


def selective_gaussian_blur(img, radius=DEFAULT_BLUR_RADIUS, max_delta=DEFAULT_MAX_DELTA):
    """
    Edge-preserving Gaussian blur.

    Each output pixel is the Gaussian-weighted mean (sigma = radius / 2) of
    the neighbours in its (2r+1)^2 window whose value differs from the
    centre by at most ``max_delta``. Borders clamp to the edge. Offsets are
    accumulated row by row in float64.
    """
    if int(radius) != radius or radius < 0:
        raise ValueError(f"radius must be a non-negative int, got {radius}")
    if not 0 <= max_delta <= 255:
        raise ValueError(f"max_delta must lie in [0, 255], got {max_delta}")
    radius = int(radius)
    if radius == 0:
        return Image(img.pixels)

    centre = img.pixels.astype(np.float64)
    height, width = img.height, img.width
    padded = np.pad(centre, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    two_sigma_sq = 2.0 * (radius / 2.0) ** 2
    num = np.zeros_like(centre)
    den = np.zeros_like(centre)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            weight = math.exp(-(dx * dx + dy * dy) / two_sigma_sq)
            neighbour = padded[radius + dy : radius + dy + height, radius + dx : radius + dx + width]
            include = np.abs(neighbour - centre) <= max_delta
            num += np.where(include, weight * neighbour, 0.0)
            den += np.where(include, weight, 0.0)
    return Image(to_uint8(num / den))


def generate_sample(condition, family, rng, cfg, blur_radius, max_delta):
    style = STYLES[family]
    scene = sample_scene(condition, rng.child("scene"))
    visible = render_visible(scene, cfg, rng.child("visible"), style)
    ir = render_ir(scene, cfg, rng.child("ir"), style)
    if style.blur:
        visible = selective_gaussian_blur(visible, blur_radius, max_delta)
        ir = selective_gaussian_blur(ir, blur_radius, max_delta)
    tags = {
        "provenance": family,
        "time": scene.time_of_day,
        "viewpoint": scene.viewpoint,
        "background_class": scene.background_class,
    }
    return Sample(visible, ir, tags, tuple(annotations(scene, cfg)))


def generate_dataset(
    n,
    condition_mix,
    family,
    rng,
    cfg=None,
    blur_radius=DEFAULT_BLUR_RADIUS,
    max_delta=DEFAULT_MAX_DELTA,
    progress=False,
):
    """
    Generate ``n`` tagged visible/IR pairs.

    Sample ``i`` depends only on ``rng.child(f"sample/{i}")``, so the result
    does not depend on generation order. The synthetic family is blurred with
    ``selective_gaussian_blur``; real_analog uses the higher-detail style
    without blur.
    """
    if n < 1:
        raise ValueError("generate_dataset needs n >= 1")
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}")
    if isinstance(condition_mix, Condition):
        condition_mix = ConditionMix.fixed(condition_mix)
    cfg = cfg or RenderConfig()
    samples = []
    for i in tqdm(range(n), desc=f"generating {family}", disable=not progress):
        sample_rng = rng.child(f"sample/{i}")
        condition = condition_mix.draw(sample_rng.child("condition"))
        samples.append(
            generate_sample(condition, family, sample_rng, cfg, blur_radius, max_delta)
        )
    logger.info("generated %d %s samples at %dx%d", n, family, cfg.width, cfg.height)
    return Dataset(samples)


def write_manifest(dataset, directory):
    """
    Write every image plus ``manifest.tsv`` into ``directory``.

    Visible images go to ``NNNNNN_vis.ppm`` and IR images to
    ``NNNNNN_ir.pgm``; a missing IR image is recorded as ``-``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for index, sample in enumerate(dataset):
        vis_name = f"{index:06d}_vis.ppm"
        write_image(sample.visible, directory / vis_name)
        ir_name = "-"
        if sample.ir is not None:
            ir_name = f"{index:06d}_ir.pgm"
            write_image(sample.ir, directory / ir_name)
        tags = sample.tags
        lines.append(
            "\t".join(
                str(value)
                for value in (
                    index,
                    tags.get("provenance", "synthetic"),
                    tags.get("time", "day"),
                    tags.get("viewpoint", "angled"),
                    tags.get("background_class", 0),
                    vis_name,
                    ir_name,
                    len(sample.annotations),
                )
            )
        )
        for box in sample.annotations:
            lines.append(f"box: {box.target_class} {box.x0} {box.y0} {box.x1} {box.y1}")
    atomic_write_bytes(directory / MANIFEST_NAME, ("\n".join(lines) + "\n").encode("utf-8"))
    return directory / MANIFEST_NAME


def _parse_box(line, source):
    parts = line[len("box:") :].split()
    if len(parts) != 5 or parts[0] not in TARGET_CLASSES:
        raise FormatError(f"{source}: malformed box line {line!r}")
    try:
        return Annotation(parts[0], *(int(p) for p in parts[1:]))
    except ValueError as e:
        raise FormatError(f"{source}: malformed box line {line!r}") from e


def read_manifest(directory):
    """Load a dataset written by ``write_manifest``."""
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.exists():
        raise FormatError(f"no {MANIFEST_NAME} in {directory}")
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]

    samples, cursor = [], 0
    while cursor < len(lines):
        source = f"{path}:{cursor + 1}"
        fields = lines[cursor].split("\t")
        if len(fields) != 8:
            raise FormatError(f"{source}: expected 8 tab-separated fields")
        _, family, time, viewpoint, background, vis_name, ir_name, box_count = fields
        try:
            background, box_count = int(background), int(box_count)
        except ValueError as e:
            raise FormatError(f"{source}: non-integer background or box count") from e
        if family not in FAMILIES:
            raise FormatError(f"{source}: unknown family {family!r}")
        box_lines = lines[cursor + 1 : cursor + 1 + box_count]
        if len(box_lines) != box_count or not all(b.startswith("box:") for b in box_lines):
            raise FormatError(f"{source}: expected {box_count} box lines")
        boxes = tuple(_parse_box(b, source) for b in box_lines)
        visible = read_image(directory / vis_name)
        ir = None if ir_name == "-" else read_image(directory / ir_name)
        tags = {
            "provenance": family,
            "time": time,
            "viewpoint": viewpoint,
            "background_class": background,
        }
        samples.append(Sample(visible, ir, tags, boxes))
        cursor += 1 + box_count
    logger.info("loaded %d samples from %s", len(samples), directory)
    return Dataset(samples)
