"""
Portable pixmap I/O, pixel normalization, and condition-tagged datasets with
seeded real/synthetic mixing and condition splits.
"""

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from v2ir.numerics import Rng, Tensor
from v2ir.utils import DataError, FormatError, atomic_write_bytes, to_uint8

logger = logging.getLogger(__name__)

FAMILIES = ("synthetic", "real_analog")
TAG_COLUMNS = ["provenance", "time", "viewpoint", "background_class"]

_HEADER = re.compile(rb"\A(P[56])\s([0-9]+)\s([0-9]+)\s([0-9]+)\s")
_MAGIC_CHANNELS = {b"P5": 1, b"P6": 3}


@dataclass(frozen=True, eq=False)
class Image:
    """8-bit raster stored as an (H, W, C) array, C in {1, 3}."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.dtype != np.uint8:
            raise ValueError(f"image pixels must be uint8, got {pixels.dtype}")
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise ValueError(f"image must be (H, W, 1|3), got {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError("image extents must be positive")
        pixels = np.array(pixels, copy=True)
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    @property
    def extents(self):
        return self.height, self.width

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(
            self.pixels, other.pixels
        )

    def __repr__(self):
        return f"Image({self.width}x{self.height}x{self.channels})"

    def to_bytes(self):
        magic = "P5" if self.channels == 1 else "P6"
        header = f"{magic}\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + self.pixels.tobytes()


def parse_image(payload, source="<bytes>"):
    match = _HEADER.match(payload)
    if match is None:
        raise FormatError(f"{source}: malformed P5/P6 header")
    magic, width, height, maxval = match.groups()
    width, height, maxval = int(width), int(height), int(maxval)
    if width < 1 or height < 1:
        raise FormatError(f"{source}: non-positive extents {width}x{height}")
    if maxval != 255:
        raise FormatError(f"{source}: maxval must be 255, got {maxval}")
    channels = _MAGIC_CHANNELS[magic]
    body = payload[match.end() :]
    expected = width * height * channels
    if len(body) < expected:
        raise FormatError(f"{source}: truncated payload ({len(body)} of {expected} bytes)")
    if len(body) > expected:
        raise FormatError(f"{source}: {len(body) - expected} trailing bytes")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
    return Image(pixels)


def read_image(path):
    """Read a binary P5 (gray) or P6 (RGB) file with maxval 255."""
    return parse_image(Path(path).read_bytes(), source=str(path))


def write_image(img, path):
    atomic_write_bytes(path, img.to_bytes())


def normalize(img):
    """Map an image onto a (1, C, H, W) tensor with v / 127.5 - 1."""
    values = img.pixels.astype(np.float64) / 127.5 - 1.0
    return Tensor(values.transpose(2, 0, 1)[None])


def denormalize(t):
    """Inverse of normalize: round half away from zero and clamp to [0, 255]."""
    values = t.data if isinstance(t, Tensor) else np.asarray(t)
    if values.ndim == 4:
        if values.shape[0] != 1:
            raise ValueError("denormalize takes a single image, use denormalize_batch")
        values = values[0]
    if values.ndim != 3:
        raise ValueError(f"denormalize expects (C, H, W) values, got {values.shape}")
    pixels = to_uint8((values.astype(np.float64) + 1.0) * 127.5)
    return Image(pixels.transpose(1, 2, 0))


def denormalize_batch(t):
    return [denormalize(t.data[i]) for i in range(t.shape[0])]


@dataclass(frozen=True, eq=False)
class Sample:
    visible: Image
    ir: Optional[Image] = None
    tags: dict = field(default_factory=dict)
    annotations: tuple = ()

    def __post_init__(self):
        if self.ir is not None and self.ir.extents != self.visible.extents:
            raise DataError(
                f"visible {self.visible.extents} and ir {self.ir.extents} extents differ"
            )
        provenance = self.tags.get("provenance")
        if provenance is not None and provenance not in FAMILIES:
            raise DataError(f"unknown provenance {provenance!r}")
        object.__setattr__(self, "annotations", tuple(self.annotations))

    @property
    def is_paired(self):
        return self.ir is not None


class Dataset:
    """
    Ordered samples with a pandas table of their condition tags.

    Instances are never mutated after construction; ``extend``, ``subset``
    and the split helpers return new datasets.
    """

    def __init__(self, samples=()):
        self.samples = list(samples)
        for sample in self.samples:
            if not isinstance(sample, Sample):
                raise TypeError(f"expected Sample, got {type(sample).__name__}")
        self.tags = pd.DataFrame(
            [[sample.tags.get(col) for col in TAG_COLUMNS] for sample in self.samples],
            columns=TAG_COLUMNS,
        )

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return Dataset(self.samples[index])
        return self.samples[index]

    def __repr__(self):
        return f"Dataset(n={len(self)}, paired={self.is_paired()})"

    @property
    def is_empty(self):
        return len(self.samples) == 0

    def extend(self, other):
        return Dataset(self.samples + list(other.samples))

    def subset(self, indices):
        return Dataset([self.samples[int(i)] for i in indices])

    def is_paired(self):
        return all(sample.is_paired for sample in self.samples)

    def require_paired(self, op):
        for index, sample in enumerate(self.samples):
            if not sample.is_paired:
                raise DataError(f"{op}: sample {index} has no IR image")

    def count(self, provenance):
        return int((self.tags["provenance"] == provenance).sum())

    def digest(self):
        h = hashlib.blake2b(digest_size=16)
        for sample in self.samples:
            h.update(json.dumps(sample.tags, sort_keys=True, default=str).encode("utf-8"))
            h.update(sample.visible.to_bytes())
            h.update(sample.ir.to_bytes() if sample.ir is not None else b"-")
            h.update(repr(sample.annotations).encode("utf-8"))
        return h.hexdigest()

    def stack_images(self, indices=None, which="visible"):
        """Normalized (N, C, H, W) batch of the visible or IR images."""
        if which not in ("visible", "ir"):
            raise ValueError(f"which must be 'visible' or 'ir', got {which!r}")
        indices = range(len(self)) if indices is None else indices
        images = [getattr(self.samples[int(i)], which) for i in indices]
        if any(img is None for img in images):
            raise DataError(f"stack_images: missing {which} image")
        if len({img.pixels.shape for img in images}) != 1:
            raise DataError("stack_images: images differ in shape")
        values = np.stack([img.pixels for img in images]).astype(np.float64) / 127.5 - 1.0
        return Tensor(values.transpose(0, 3, 1, 2))


@dataclass(frozen=True)
class MixSpec:
    n_real: int
    n_synth: int
    seed: int = 0

    def __post_init__(self):
        if self.n_real < 0 or self.n_synth < 0:
            raise ValueError("mix counts must be non-negative")
        if self.n_real + self.n_synth < 1:
            raise ValueError("a mix needs at least one sample")

    @property
    def label(self):
        return f"real{self.n_real}+synth{self.n_synth}"


def _draw(pool, n, rng, name):
    if n > len(pool):
        raise DataError(f"mix needs {n} {name} samples, pool has {len(pool)}")
    if n == 0:
        return Dataset()
    return pool.subset(rng.choice(len(pool), n, replace=False))


def mix(real, synth, spec):
    """Draw n_real and n_synth samples without replacement, then shuffle them together."""
    rng = Rng(spec.seed, "mix")
    combined = _draw(real, spec.n_real, rng.child("real"), "real").extend(
        _draw(synth, spec.n_synth, rng.child("synth"), "synthetic")
    )
    order = rng.child("permute").permutation(len(combined))
    logger.debug("mixed %s from pools of %d real and %d synthetic", spec.label, len(real), len(synth))
    return combined.subset(order)


def split_by_condition(ds, predicate):
    """
    Stable partition of a dataset into (matching, rest).

    ``predicate`` is either a callable on a sample's tag dict or a pandas
    query string over the tag columns, e.g. ``"time == 'day'"``.
    """
    if isinstance(predicate, str):
        matched = set(ds.tags.query(predicate).index) if len(ds) else set()
        flags = [i in matched for i in range(len(ds))]
    else:
        flags = [bool(predicate(sample.tags)) for sample in ds.samples]
    matching = [i for i, flag in enumerate(flags) if flag]
    rest = [i for i, flag in enumerate(flags) if not flag]
    return ds.subset(matching), ds.subset(rest)
