"""
Generator evaluation with the percent L1 metric, and the data-mix sweep that
trains one model per (mix, seed) cell and scores it on condition splits.
"""

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from v2ir.datapipe import denormalize, mix, normalize, split_by_condition, write_image
from v2ir.models import Model, generator_forward, sample_z
from v2ir.numerics import Rng, Tensor
from v2ir.objectives import l1_metric_percent
from v2ir.trainer import save_checkpoint, train_cgan, train_cyclegan
from v2ir.utils import DataError, FormatError, NumericalError, atomic_write_bytes

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["mix", "split", "seed", "l1_percent", "epochs"]
FAILED = "failed"
PREVIEW_PARTS = ("input", "generated", "truth")


def predict(generator, visible, z_rng=None):
    """
    Translate one visible Image to an IR Image.

    ``generator`` is a generator Model or any callable mapping a normalized
    (1, C, H, W) tensor to a tensor in [-1, 1].
    """
    x = normalize(visible)
    if isinstance(generator, Model):
        z_rng = z_rng or Rng(0, "predict")
        z = sample_z(generator.spec, 1, visible.height, visible.width, z_rng)
        with generator.params.frozen():
            out = generator_forward(generator, x, z)
    else:
        out = generator(x)
        out = out if isinstance(out, Tensor) else Tensor(out)
    return denormalize(out)


def evaluate(generator, test, z_rng=None):
    """
    Mean and per-sample percent L1 between predicted and true IR images,
    both on the [0, 1] pixel scale.
    """
    if len(test) == 0:
        raise DataError("evaluate needs at least one test sample")
    test.require_paired("evaluate")
    z_rng = z_rng or Rng(0, "evaluate")
    per_sample = []
    for index, sample in enumerate(test):
        predicted = predict(generator, sample.visible, z_rng.child(f"sample/{index}"))
        per_sample.append(
            l1_metric_percent(predicted.pixels / 255.0, sample.ir.pixels / 255.0)
        )
    return float(np.mean(per_sample)), per_sample


class SweepTable:
    """One row per (mix, split, seed); failed cells carry NaN scores."""

    def __init__(self, df=None, source_dir=None):
        columns = SWEEP_COLUMNS + ["status"]
        self.df = pd.DataFrame(columns=columns) if df is None else df.reset_index(drop=True)
        self.source_dir = Path(source_dir) if source_dir is not None else None

    def __len__(self):
        return len(self.df)

    @classmethod
    def from_rows(cls, rows, source_dir=None):
        return cls(pd.DataFrame(rows, columns=SWEEP_COLUMNS + ["status"]), source_dir)

    def ok_rows(self):
        return self.df.query("status == 'ok'")

    def to_csv(self, path):
        out = self.df[SWEEP_COLUMNS].copy()
        out["l1_percent"] = out["l1_percent"].astype(float)
        out["epochs"] = out["epochs"].astype("Int64")
        atomic_write_bytes(path, out.to_csv(index=False, na_rep=FAILED).encode("utf-8"))

    @classmethod
    def read_csv(cls, path):
        df = pd.read_csv(path, na_values=[FAILED], keep_default_na=False)
        if list(df.columns) != SWEEP_COLUMNS:
            raise FormatError(f"{path}: sweep table header must be {','.join(SWEEP_COLUMNS)}")
        df["status"] = np.where(df["l1_percent"].isna(), FAILED, "ok")
        return cls(df, source_dir=Path(path).parent)


class SweepRunner:
    """
    Runs every (mix, seed) cell of a SweepSpec.

    Real training samples come from the home condition of the real pool;
    the test set of each split is a fixed held-out draw of real_analog
    samples, shared by all cells.
    """

    def __init__(self, spec, progress=False):
        self.spec = spec
        self.progress = progress

    def split_predicates(self):
        home_time, home_bg = self.spec.home_time, self.spec.home_background
        return {
            "in_condition": lambda t: t["time"] == home_time and t["background_class"] == home_bg,
            "cross_time": lambda t: t["time"] != home_time and t["background_class"] == home_bg,
            "cross_time_and_background": lambda t: t["time"] != home_time
            and t["background_class"] != home_bg,
        }

    def test_sets(self, real):
        """Return (test set per split, real training pool)."""
        real, _ = split_by_condition(real, "provenance == 'real_analog'")
        predicates = self.split_predicates()
        holdout = Rng(0, "sweep/holdout")
        home, _ = split_by_condition(real, predicates["in_condition"])
        tests, held_out_home = {}, []
        for split in self.spec.splits:
            candidates, _ = split_by_condition(real, predicates[split])
            if len(candidates) < self.spec.test_size:
                raise DataError(
                    f"split {split!r} needs {self.spec.test_size} real samples, "
                    f"pool has {len(candidates)}"
                )
            picked = np.sort(
                holdout.child(split).choice(len(candidates), self.spec.test_size, replace=False)
            )
            tests[split] = candidates.subset(picked)
            if split == "in_condition":
                held_out_home = set(int(i) for i in picked)
        train_real = home.subset([i for i in range(len(home)) if i not in held_out_home])
        return tests, train_real

    def run_cell(self, mix_template, seed, train_real, synth, tests, cell_dir):
        mix_spec = replace(mix_template, seed=seed)
        train_set = mix(train_real, synth, mix_spec)
        cfg = replace(self.spec.train, seed=seed, algorithm=self.spec.algorithm)
        if cfg.algorithm == "cgan":
            generator, discriminator, record = train_cgan(train_set, cfg)
            models = {"generator": generator, "discriminator": discriminator}
        else:
            g_ab, g_ba, d_a, d_b, record = train_cyclegan(train_set, train_set, cfg)
            models = {"g_ab": g_ab, "g_ba": g_ba, "d_a": d_a, "d_b": d_b}
            generator = g_ab

        cell_dir.mkdir(parents=True, exist_ok=True)
        record.to_csv(cell_dir / "run.csv")
        save_checkpoint(models, cfg, cell_dir / "checkpoint.v2ir")

        scores = {}
        for split, test in tests.items():
            z_rng = Rng(seed, f"eval/{split}")
            scores[split], _ = evaluate(generator, test, z_rng)
            for k in range(min(self.spec.grid_samples, len(test))):
                sample = test[k]
                generated = predict(generator, sample.visible, z_rng.child(f"sample/{k}"))
                for part, image in zip(PREVIEW_PARTS, (sample.visible, generated, sample.ir)):
                    write_image(image, preview_path(cell_dir, split, k, part))
        return scores, len(record)

    def run(self, real, synth, out_dir):
        out_dir = Path(out_dir)
        tests, train_real = self.test_sets(real)
        logger.info(
            "sweep: %d real training samples, %d synthetic, %s",
            len(train_real),
            len(synth),
            ", ".join(f"{name}={len(ds)}" for name, ds in tests.items()),
        )
        rows = []
        cells = [(m, seed) for m in self.spec.mixes for seed in self.spec.seeds]
        for mix_template, seed in tqdm(cells, desc="sweep", disable=not self.progress):
            cell_dir = cell_path(out_dir, mix_template.label, seed)
            try:
                scores, epochs = self.run_cell(mix_template, seed, train_real, synth, tests, cell_dir)
            except (NumericalError, DataError, ValueError) as e:
                logger.warning("cell %s seed %d failed: %s", mix_template.label, seed, e)
                cell_dir.mkdir(parents=True, exist_ok=True)
                (cell_dir / "error.txt").write_text(f"{type(e).__name__}: {e}\n", encoding="utf-8")
                for split in self.spec.splits:
                    rows.append([mix_template.label, split, seed, np.nan, np.nan, FAILED])
                continue
            for split in self.spec.splits:
                rows.append([mix_template.label, split, seed, scores[split], epochs, "ok"])
        table = SweepTable.from_rows(rows, source_dir=out_dir)
        table.to_csv(out_dir / "sweep.csv")
        return table


def cell_path(out_dir, mix_label, seed):
    return Path(out_dir) / mix_label / f"seed{seed}"


def preview_path(cell_dir, split, index, part):
    suffix = "ppm" if part == "input" else "pgm"
    return Path(cell_dir) / "previews" / f"{split}_{index}_{part}.{suffix}"


def run_sweep(spec, real, synth, out_dir, progress=False):
    """Train and score every sweep cell; writes ``sweep.csv`` and per-cell artifacts."""
    return SweepRunner(spec, progress=progress).run(real, synth, out_dir)
