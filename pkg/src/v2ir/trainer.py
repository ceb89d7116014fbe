"""
Alternating adversarial training for paired CGAN and unpaired CycleGAN runs,
per-epoch run records, convergence detection and binary checkpoints.
"""

import hashlib
import io
import json
import logging
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from v2ir.configs import TrainConfig
from v2ir.models import (
    Model,
    build_discriminator,
    build_generator,
    check_divisible,
    discriminator_forward,
    generator_forward,
    parameter_shapes,
    sample_z,
    spec_from_dict,
    spec_to_dict,
)
from v2ir.numerics import ParamStore, Rng, Tensor, backward, sgd_step
from v2ir.objectives import LossReport, cgan_g_terms, cycle_parts, d_loss, g_adv_loss
from v2ir.utils import ChecksumError, DataError, FormatError, NumericalError, atomic_write_bytes

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ["epoch", "d_loss", "g_adv", "g_l1", "cyc_ab", "cyc_ba", "seconds"]
LOSS_COLUMNS = ["d_loss", "g_adv", "g_l1", "cyc_ab", "cyc_ba"]

CHECKPOINT_MAGIC = b"V2IR"
CHECKPOINT_VERSION = 1
DIGEST_SIZE = 8


class RunRecord:
    """Per-epoch losses of one training run, backed by a pandas DataFrame."""

    def __init__(self, df=None):
        self._rows = []
        if df is not None:
            if list(df.columns) != RECORD_COLUMNS:
                raise FormatError(f"run record columns must be {RECORD_COLUMNS}")
            for row in df.itertuples(index=False):
                self.append(int(row.epoch), LossReport(*row[1:6]), float(row.seconds))

    def append(self, epoch, report, seconds=0.0):
        if self._rows and epoch <= self._rows[-1]["epoch"]:
            raise ValueError(f"epochs must increase, got {epoch} after {self._rows[-1]['epoch']}")
        self._rows.append({"epoch": int(epoch), **report.as_dict(), "seconds": float(seconds)})

    def __len__(self):
        return len(self._rows)

    @property
    def df(self):
        return pd.DataFrame(self._rows, columns=RECORD_COLUMNS)

    @property
    def epochs(self):
        return [row["epoch"] for row in self._rows]

    def last(self):
        return LossReport(**{col: self._rows[-1][col] for col in LOSS_COLUMNS})

    def g_total(self):
        return np.array(
            [row["g_adv"] + row["g_l1"] + row["cyc_ab"] + row["cyc_ba"] for row in self._rows]
        )

    def cycle(self):
        return np.array([row["cyc_ab"] + row["cyc_ba"] for row in self._rows])

    def to_csv(self, path):
        atomic_write_bytes(path, self.df.to_csv(index=False).encode("utf-8"))

    @classmethod
    def read_csv(cls, path):
        return cls(pd.read_csv(path))


def converged(record, window, tau):
    """
    True once two full windows exist and the mean generator objective of the
    last ``window`` epochs is within ``tau`` of the window before it.
    """
    if window < 2:
        raise ValueError("convergence window must be >= 2")
    g_total = record.g_total()
    if len(g_total) < 2 * window:
        return False
    recent = g_total[-window:].mean()
    previous = g_total[-2 * window : -window].mean()
    return bool(abs(recent - previous) < tau)


def _channels(dataset, which):
    image = getattr(dataset[0], which)
    if image is None:
        raise DataError(f"sample 0 has no {which} image")
    return image.channels


def _batch(stack, indices):
    return Tensor(stack.data[indices])


class _Trainer:
    """Epoch loop shared by both algorithms."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.rng = Rng(cfg.seed, cfg.algorithm)

    def _fit(self, run_epoch, n_steps):
        record = RunRecord()
        epochs = tqdm(
            range(1, self.cfg.max_epochs + 1), desc=self.cfg.algorithm, disable=not self.cfg.progress
        )
        for epoch in epochs:
            start = time.perf_counter()
            try:
                report = run_epoch(epoch)
            except NumericalError as e:
                raise NumericalError(f"{self.cfg.algorithm} epoch {epoch}: {e}") from e
            seconds = time.perf_counter() - start if self.cfg.record_wall_time else 0.0
            record.append(epoch, report, seconds)
            logger.debug("epoch %d: %s", epoch, report)
            if converged(record, self.cfg.window, self.cfg.tau):
                logger.info("converged after %d epochs", epoch)
                break
        logger.info(
            "%s finished %d epochs (%d steps each), final g_total %.5f",
            self.cfg.algorithm,
            len(record),
            n_steps,
            record.g_total()[-1],
        )
        return record


class CganTrainer(_Trainer):
    """
    Paired visible->IR training with a conditional patch discriminator.

    Each batch runs one discriminator step then one generator step; the
    generated batch of the first step is reused by the second.
    """

    def __init__(self, cfg, in_channels=3, out_channels=1):
        super().__init__(cfg)
        self.generator = build_generator(
            cfg.generator_spec(in_channels, out_channels),
            self.rng.child("init/generator"),
            image_size=cfg.image_size,
        )
        self.discriminator = build_discriminator(
            cfg.discriminator_spec(True, y_channels=out_channels, x_channels=in_channels),
            self.rng.child("init/discriminator"),
        )

    def models(self):
        return {"generator": self.generator, "discriminator": self.discriminator}

    def discriminator_step(self, x, y, z):
        g, d = self.generator, self.discriminator
        fake = generator_forward(g, x, z)
        loss = d_loss(discriminator_forward(d, y, x), discriminator_forward(d, fake.detach(), x))
        backward(loss)
        sgd_step(d.params, self.cfg.lr_d)
        return fake, loss.item()

    def generator_step(self, x, y, fake):
        d = self.discriminator
        with d.params.frozen():
            adv, l1 = cgan_g_terms(discriminator_forward(d, fake, x), fake, y, self.cfg.weights)
            backward(adv + l1)
        sgd_step(self.generator.params, self.cfg.lr_g)
        return adv.item(), l1.item()

    def fit(self, paired):
        if len(paired) == 0:
            raise DataError("train_cgan needs at least one sample")
        paired.require_paired("train_cgan")
        xs, ys = paired.stack_images(which="visible"), paired.stack_images(which="ir")
        _, _, height, width = xs.shape
        check_divisible(self.generator.spec, height, width)
        if height != self.cfg.image_size or width != self.cfg.image_size:
            logger.warning(
                "training images are %dx%d, config image_size is %d",
                width,
                height,
                self.cfg.image_size,
            )
        n, batch = len(paired), self.cfg.batch

        def run_epoch(epoch):
            epoch_rng = self.rng.child(f"epoch/{epoch}")
            order = epoch_rng.child("shuffle").permutation(n)
            totals = np.zeros(3)
            steps = 0
            for steps, start in enumerate(range(0, n, batch), start=1):
                idx = order[start : start + batch]
                x, y = _batch(xs, idx), _batch(ys, idx)
                z = sample_z(self.generator.spec, len(idx), height, width, epoch_rng.child(f"z/{steps}"))
                fake, d_value = self.discriminator_step(x, y, z)
                adv, l1 = self.generator_step(x, y, fake)
                totals += (d_value, adv, l1)
            d_mean, adv_mean, l1_mean = totals / steps
            return LossReport(d_loss=d_mean, g_adv=adv_mean, g_l1=l1_mean)

        return self._fit(run_epoch, -(-n // batch))


class CycleGanTrainer(_Trainer):
    """
    Unpaired training of G_AB (visible->IR) and G_BA (IR->visible) with one
    unconditional discriminator per domain.
    """

    def __init__(self, cfg, a_channels=3, b_channels=1):
        super().__init__(cfg)
        self.g_ab = build_generator(
            cfg.generator_spec(a_channels, b_channels), self.rng.child("init/g_ab"), cfg.image_size
        )
        self.g_ba = build_generator(
            cfg.generator_spec(b_channels, a_channels), self.rng.child("init/g_ba"), cfg.image_size
        )
        self.d_a = build_discriminator(
            cfg.discriminator_spec(False, y_channels=a_channels), self.rng.child("init/d_a")
        )
        self.d_b = build_discriminator(
            cfg.discriminator_spec(False, y_channels=b_channels), self.rng.child("init/d_b")
        )

    def models(self):
        return {"g_ab": self.g_ab, "g_ba": self.g_ba, "d_a": self.d_a, "d_b": self.d_b}

    def discriminator_step(self, a, b):
        fake_b = generator_forward(self.g_ab, a)
        fake_a = generator_forward(self.g_ba, b)
        loss = d_loss(
            discriminator_forward(self.d_a, a), discriminator_forward(self.d_a, fake_a.detach())
        ) + d_loss(
            discriminator_forward(self.d_b, b), discriminator_forward(self.d_b, fake_b.detach())
        )
        backward(loss)
        sgd_step(self.d_a.params, self.cfg.lr_d)
        sgd_step(self.d_b.params, self.cfg.lr_d)
        return fake_a, fake_b, loss.item()

    def generator_step(self, a, b, fake_a, fake_b):
        weights = self.cfg.weights
        with self.d_a.params.frozen(), self.d_b.params.frozen():
            adv = g_adv_loss(discriminator_forward(self.d_b, fake_b), weights.g_adv_mode) + g_adv_loss(
                discriminator_forward(self.d_a, fake_a), weights.g_adv_mode
            )
            rec_a = generator_forward(self.g_ba, fake_b)
            rec_b = generator_forward(self.g_ab, fake_a)
            cyc_ab, cyc_ba = cycle_parts(a, rec_a, b, rec_b, weights.lambda_cyc)
            backward(adv + cyc_ab + cyc_ba)
        sgd_step(self.g_ab.params, self.cfg.lr_g)
        sgd_step(self.g_ba.params, self.cfg.lr_g)
        return adv.item(), cyc_ab.item(), cyc_ba.item()

    def fit(self, pool_a, pool_b):
        if len(pool_a) == 0 or len(pool_b) == 0:
            raise DataError("train_cyclegan needs non-empty pools")
        xa, xb = pool_a.stack_images(which="visible"), pool_b.stack_images(which="ir")
        if xa.shape[2:] != xb.shape[2:]:
            raise DataError(f"pool extents differ: {xa.shape[2:]} vs {xb.shape[2:]}")
        check_divisible(self.g_ab.spec, *xa.shape[2:])
        n_a, n_b, batch = len(pool_a), len(pool_b), self.cfg.batch
        longest = max(n_a, n_b)

        def run_epoch(epoch):
            epoch_rng = self.rng.child(f"epoch/{epoch}")
            order_a = epoch_rng.child("shuffle/a").permutation(n_a)
            order_b = epoch_rng.child("shuffle/b").permutation(n_b)
            totals = np.zeros(4)
            steps = 0
            for steps, start in enumerate(range(0, longest, batch), start=1):
                positions = np.arange(start, min(start + batch, longest))
                a = _batch(xa, order_a[positions % n_a])
                b = _batch(xb, order_b[positions % n_b])
                fake_a, fake_b, d_value = self.discriminator_step(a, b)
                totals += (d_value, *self.generator_step(a, b, fake_a, fake_b))
            d_mean, adv_mean, ab_mean, ba_mean = totals / steps
            return LossReport(d_loss=d_mean, g_adv=adv_mean, cyc_ab=ab_mean, cyc_ba=ba_mean)

        return self._fit(run_epoch, -(-longest // batch))


def train_cgan(paired, cfg):
    """Train a conditional GAN on paired samples. Returns (G, D, RunRecord)."""
    if cfg.algorithm != "cgan":
        raise ValueError("train_cgan needs a config with algorithm = cgan")
    if len(paired) == 0:
        raise DataError("train_cgan needs at least one sample")
    paired.require_paired("train_cgan")
    trainer = CganTrainer(cfg, _channels(paired, "visible"), _channels(paired, "ir"))
    record = trainer.fit(paired)
    return trainer.generator, trainer.discriminator, record


def train_cyclegan(pool_a, pool_b, cfg):
    """Train on unpaired pools. Returns (G_AB, G_BA, D_A, D_B, RunRecord)."""
    if cfg.algorithm != "cyclegan":
        raise ValueError("train_cyclegan needs a config with algorithm = cyclegan")
    if len(pool_a) == 0 or len(pool_b) == 0:
        raise DataError("train_cyclegan needs non-empty pools")
    trainer = CycleGanTrainer(cfg, _channels(pool_a, "visible"), _channels(pool_b, "ir"))
    record = trainer.fit(pool_a, pool_b)
    return trainer.g_ab, trainer.g_ba, trainer.d_a, trainer.d_b, record


@dataclass
class Checkpoint:
    models: dict
    cfg: TrainConfig
    version: int = CHECKPOINT_VERSION

    def translator(self):
        """The visible->IR generator of the checkpoint."""
        for name in ("generator", "g_ab"):
            if name in self.models:
                return self.models[name]
        raise FormatError("checkpoint holds no visible->IR generator")


def save_checkpoint(models, cfg, path):
    """
    Write ``models`` (name -> Model) and ``cfg`` to ``path``.

    Layout: ``V2IR``, u32 version, u32 length + JSON config, then per
    parameter u32 name length, name, u32 ndim, u32 dims and little-endian
    float32 values, then an 8-byte BLAKE2b digest of everything before it.
    """
    config = {
        "train": cfg.to_dict(),
        "models": {name: spec_to_dict(model.spec) for name, model in models.items()},
    }
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    out.write(blob)
    for model_name, model in models.items():
        if "." in model_name:
            raise ValueError(f"model names must not contain '.', got {model_name!r}")
        for param_name, value in model.params:
            name = f"{model_name}.{param_name}".encode("utf-8")
            out.write(struct.pack("<I", len(name)))
            out.write(name)
            out.write(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
            out.write(np.ascontiguousarray(value.data, dtype="<f4").tobytes())
    body = out.getvalue()
    atomic_write_bytes(path, body + hashlib.blake2b(body, digest_size=DIGEST_SIZE).digest())


class _Reader:
    def __init__(self, body, source):
        self.body, self.offset, self.source = body, 0, source

    def take(self, n):
        if self.offset + n > len(self.body):
            raise FormatError(f"{self.source}: truncated checkpoint")
        chunk = self.body[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self, count=1):
        values = struct.unpack(f"<{count}I", self.take(4 * count))
        return values[0] if count == 1 else values

    @property
    def exhausted(self):
        return self.offset == len(self.body)


def load_checkpoint(path):
    payload = Path(path).read_bytes()
    source = str(path)
    if payload[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: bad magic {payload[:4]!r}")
    if len(payload) < 12 + DIGEST_SIZE:
        raise FormatError(f"{source}: truncated checkpoint")
    body, digest = payload[:-DIGEST_SIZE], payload[-DIGEST_SIZE:]
    if hashlib.blake2b(body, digest_size=DIGEST_SIZE).digest() != digest:
        raise ChecksumError(f"{source}: digest mismatch")

    reader = _Reader(body, source)
    reader.take(4)
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    try:
        config = json.loads(reader.take(reader.u32()).decode("utf-8"))
        cfg = TrainConfig.from_dict(config["train"])
        specs = {name: spec_from_dict(spec) for name, spec in config["models"].items()}
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{source}: malformed config: {e}") from e

    values = {}
    while not reader.exhausted:
        name = reader.take(reader.u32()).decode("utf-8")
        shape = tuple(np.atleast_1d(reader.u32(reader.u32())))
        count = int(np.prod(shape))
        values[name] = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)

    models = {}
    for model_name, spec in specs.items():
        params = ParamStore()
        for param_name, shape in parameter_shapes(spec):
            key = f"{model_name}.{param_name}"
            if key not in values or values[key].shape != tuple(shape):
                raise FormatError(f"{source}: missing or misshaped parameter {key!r}")
            params.add(param_name, Tensor(values.pop(key).astype(np.float32)))
        models[model_name] = Model(spec=spec, params=params)
    if values:
        raise FormatError(f"{source}: unexpected parameters {sorted(values)}")
    return Checkpoint(models=models, cfg=cfg, version=version)
