"""
Command line entry point: ``v2ir {gen-data,train,transform,eval,sweep,report}``.

Exit codes: 0 success, 1 usage or config error, 2 data or format error,
3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import pandas as pd

from v2ir.configs import ALGORITHMS, SweepSpec, TrainConfig
from v2ir.datapipe import FAMILIES, read_image, write_image
from v2ir.evaluation import SweepTable, evaluate, predict, run_sweep
from v2ir.numerics import Rng
from v2ir.reporting import emit_report
from v2ir.synthcam import (
    DEFAULT_BLUR_RADIUS,
    DEFAULT_MAX_DELTA,
    NUM_BACKGROUNDS,
    TIMES,
    VIEWPOINTS,
    ConditionMix,
    RenderConfig,
    generate_dataset,
    read_manifest,
    write_manifest,
)
from v2ir.trainer import load_checkpoint, save_checkpoint, train_cgan, train_cyclegan
from v2ir.utils import ConfigError, DataError, NumericalError, atomic_write_bytes

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
MIXED = "mixed"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _axis(value, allowed):
    if value == MIXED:
        return {key: 1.0 for key in allowed}
    return {value: 1.0}


def gen_data(args):
    backgrounds = range(NUM_BACKGROUNDS) if args.background == MIXED else [int(args.background)]
    condition_mix = ConditionMix(
        times=_axis(args.time, TIMES),
        viewpoints=_axis(args.viewpoint, VIEWPOINTS),
        backgrounds={b: 1.0 for b in backgrounds},
    )
    dataset = generate_dataset(
        args.n,
        condition_mix,
        args.family,
        Rng(args.seed, f"gen-data/{args.family}"),
        cfg=RenderConfig(width=args.size, height=args.size),
        blur_radius=args.blur_radius,
        max_delta=args.max_delta,
        progress=True,
    )
    manifest = write_manifest(dataset, args.out)
    logger.info("wrote %d samples to %s", len(dataset), manifest)


def _load_train_config(args):
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    try:
        cfg.update_fields(algorithm=args.algo, seed=args.seed, progress=True)
    except ValueError as e:
        raise ConfigError(f"{args.config}: {e}") from e
    return cfg


def train(args):
    cfg = _load_train_config(args)
    data = read_manifest(args.data)
    out = Path(args.out)
    if cfg.algorithm == "cgan":
        if args.data_b:
            raise ConfigError("--data-b is only used with --algo cyclegan")
        generator, discriminator, record = train_cgan(data, cfg)
        models = {"generator": generator, "discriminator": discriminator}
    else:
        pool_b = read_manifest(args.data_b) if args.data_b else data
        g_ab, g_ba, d_a, d_b, record = train_cyclegan(data, pool_b, cfg)
        models = {"g_ab": g_ab, "g_ba": g_ba, "d_a": d_a, "d_b": d_b}
    out.mkdir(parents=True, exist_ok=True)
    record.to_csv(out / "run.csv")
    save_checkpoint(models, cfg, out / "checkpoint.v2ir")
    logger.info("trained %d epochs, checkpoint in %s", len(record), out / "checkpoint.v2ir")


def _translator(checkpoint, channels):
    generator = checkpoint.translator()
    if channels != generator.spec.in_channels:
        raise DataError(
            f"generator takes {generator.spec.in_channels}-channel images, got {channels}"
        )
    return generator


def transform(args):
    checkpoint = load_checkpoint(args.checkpoint)
    visible = read_image(args.input)
    generator = _translator(checkpoint, visible.channels)
    try:
        ir = predict(generator, visible, Rng(args.z_seed, "transform"))
    except ValueError as e:
        raise DataError(f"{args.input}: {e}") from e
    write_image(ir, args.output)


def eval_checkpoint(args):
    checkpoint = load_checkpoint(args.checkpoint)
    test = read_manifest(args.data)
    if len(test) == 0:
        raise DataError(f"{args.data} holds no samples")
    generator = _translator(checkpoint, test[0].visible.channels)
    mean, per_sample = evaluate(generator, test, Rng(args.z_seed, "evaluate"))
    df = pd.DataFrame({"sample": range(len(per_sample)), "l1_percent": per_sample})
    atomic_write_bytes(args.out, df.to_csv(index=False).encode("utf-8"))
    logger.info("mean L1 %.4f%% over %d samples", mean, len(per_sample))
    print(f"{mean:.6f}")


def sweep(args):
    spec = SweepSpec.from_file(args.spec) if args.spec else SweepSpec.default()
    real, synth = read_manifest(args.real), read_manifest(args.synth)
    table = run_sweep(spec, real, synth, args.out, progress=True)
    failed = len(table) - len(table.ok_rows())
    if failed:
        logger.warning("%d of %d sweep rows failed", failed, len(table))


def report(args):
    table = SweepTable.read_csv(args.table)
    emit_report(table, args.out, grid_samples=args.grid_samples)


def build_parser():
    parser = _Parser(prog="v2ir", description="Visible-to-IR image translation toolkit")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = commands.add_parser("gen-data", help="render a procedural visible/IR dataset")
    p.add_argument("--family", choices=FAMILIES, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--time", choices=TIMES + (MIXED,), default=MIXED)
    p.add_argument("--viewpoint", choices=VIEWPOINTS + (MIXED,), default=MIXED)
    p.add_argument(
        "--background",
        choices=[str(b) for b in range(NUM_BACKGROUNDS)] + [MIXED],
        default=MIXED,
    )
    p.add_argument("--size", type=int, default=64, help="square image extent in pixels")
    p.add_argument("--blur-radius", type=int, default=DEFAULT_BLUR_RADIUS)
    p.add_argument("--max-delta", type=int, default=DEFAULT_MAX_DELTA)
    p.set_defaults(handler=gen_data)

    p = commands.add_parser("train", help="train a cgan or cyclegan model")
    p.add_argument("--algo", choices=ALGORITHMS, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--data-b", help="IR pool for unpaired cyclegan training")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(handler=train)

    p = commands.add_parser("transform", help="translate one visible image to IR")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--z-seed", type=int, default=0)
    p.set_defaults(handler=transform)

    p = commands.add_parser("eval", help="score a checkpoint on a paired dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--z-seed", type=int, default=0)
    p.set_defaults(handler=eval_checkpoint)

    p = commands.add_parser("sweep", help="run a real/synthetic data-mix sweep")
    p.add_argument("--spec", help="sweep spec file, the packaged default when omitted")
    p.add_argument("--real", required=True)
    p.add_argument("--synth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=sweep)

    p = commands.add_parser("report", help="summaries, trend plot and grids of a sweep")
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-samples", type=int, default=2)
    p.set_defaults(handler=report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args.handler(args)
    except ConfigError as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except NumericalError as e:
        logger.error("numerical failure: %s", e)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as e:
        logger.error("%s", e)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
