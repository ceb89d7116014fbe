import logging
import re
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import seaborn as sns

from v2ir.datapipe import Image, read_image, write_image
from v2ir.evaluation import PREVIEW_PARTS, cell_path, preview_path
from v2ir.utils import DataError, atomic_write_bytes

logger = logging.getLogger(__name__)

SEPARATOR = 2
_MIX_LABEL = re.compile(r"^real(\d+)\+synth(\d+)$")


def mix_counts(label):
    match = _MIX_LABEL.match(label)
    if match is None:
        raise ValueError(f"not a mix label: {label!r}")
    return int(match.group(1)), int(match.group(2))


class Reporter:
    @staticmethod
    def summarize(table_df):
        """Median L1 percent per (mix, split) over the seeds that succeeded."""
        ok = table_df.dropna(subset=["l1_percent"])
        summary = (
            ok.groupby(["mix", "split"], sort=False)
            .agg(median_l1_percent=("l1_percent", "median"), n_seeds=("seed", "count"))
            .reset_index()
        )
        counts = [mix_counts(label) for label in summary["mix"]]
        summary.insert(2, "n_real", [c[0] for c in counts])
        summary.insert(3, "n_synth", [c[1] for c in counts])
        return summary

    @staticmethod
    def compose_grid(panels, separator=SEPARATOR):
        """
        Lay images out left to right with white separator columns.

        Gray panels are replicated to three channels.
        """
        heights = {panel.height for panel in panels}
        if len(heights) != 1:
            raise ValueError("grid panels must share one height")
        height = heights.pop()
        white = np.full((height, separator, 3), 255, dtype=np.uint8)
        columns = []
        for index, panel in enumerate(panels):
            if index:
                columns.append(white)
            pixels = panel.pixels
            columns.append(np.repeat(pixels, 3, axis=2) if panel.channels == 1 else pixels)
        return Image(np.concatenate(columns, axis=1))

    @staticmethod
    def draw_trend(summary, path):
        """Point plot of median L1 against synthetic sample count, one line per split."""
        data = summary.copy()
        sns.set_theme(font_scale=1.1, style="whitegrid")
        fig, ax = plt.subplots(figsize=(7, 4.5))
        sns.pointplot(
            ax=ax,
            data=data.sort_values(["n_synth", "n_real"]),
            x="mix",
            y="median_l1_percent",
            hue="split",
        )
        ax.set_xlabel("Training mix")
        ax.set_ylabel("Median L1 loss (%)")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)

    @staticmethod
    def write_grids(table_df, sweep_dir, out_dir, grid_samples):
        written = []
        if grid_samples <= 0 or sweep_dir is None:
            return written
        ok = table_df.dropna(subset=["l1_percent"])
        for (mix, split), group in ok.groupby(["mix", "split"], sort=False):
            seed = int(group["seed"].min())
            cell_dir = cell_path(sweep_dir, mix, seed)
            for k in range(grid_samples):
                paths = [preview_path(cell_dir, split, k, part) for part in PREVIEW_PARTS]
                if not all(p.exists() for p in paths):
                    logger.warning("no previews for %s / %s sample %d in %s", mix, split, k, cell_dir)
                    break
                grid = Reporter.compose_grid([read_image(p) for p in paths])
                target = Path(out_dir) / "grids" / f"{mix}_{split}_seed{seed}_{k}.ppm"
                write_image(grid, target)
                written.append(target)
        return written


def emit_report(table, out_dir, grid_samples=2, sweep_dir=None):
    """
    Write ``sweep.csv``, ``summary.csv``, ``trend.png`` and the
    input | generated | truth preview grids of a sweep into ``out_dir``.
    """
    if len(table) == 0:
        raise DataError("emit_report needs a non-empty sweep table")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep_dir = sweep_dir if sweep_dir is not None else table.source_dir

    written = [out_dir / "sweep.csv", out_dir / "summary.csv"]
    table.to_csv(written[0])
    summary = Reporter.summarize(table.df)
    atomic_write_bytes(written[1], summary.to_csv(index=False).encode("utf-8"))
    if len(summary):
        trend = out_dir / "trend.png"
        Reporter.draw_trend(summary, trend)
        written.append(trend)
    else:
        logger.warning("every sweep cell failed, skipping the trend plot")
    written += Reporter.write_grids(table.df, sweep_dir, out_dir, grid_samples)
    logger.info("report written to %s (%d files)", out_dir, len(written))
    return written
