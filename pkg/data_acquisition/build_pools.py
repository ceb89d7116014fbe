"""
Render the real_analog and synthetic pools used by the packaged sweep.

The real pool holds enough home-condition samples (day, background 0) for the
largest real count plus the in-condition test set, and enough night samples
at home and away backgrounds for the two cross-condition test sets.
"""

import sys

from v2ir.datapipe import Dataset
from v2ir.numerics import Rng
from v2ir.synthcam import NUM_BACKGROUNDS, ConditionMix, RenderConfig, generate_dataset, write_manifest


def real_pool(render, seed):
    away = {b: 1.0 for b in range(1, NUM_BACKGROUNDS)}
    groups = {
        "home": (48, ConditionMix(times={"day": 1.0}, backgrounds={0: 1.0})),
        "night_home": (24, ConditionMix(times={"night": 1.0}, backgrounds={0: 1.0})),
        "night_away": (24, ConditionMix(times={"night": 1.0}, backgrounds=away)),
    }
    pool = Dataset()
    for name, (n, condition_mix) in groups.items():
        part = generate_dataset(n, condition_mix, "real_analog", Rng(seed, f"real/{name}"), render, progress=True)
        pool = pool.extend(part)
    return pool


if __name__ == "__main__":
    out_dir = sys.argv[1] if len(sys.argv) > 1 else "pools"
    render = RenderConfig(width=32, height=32)

    real = real_pool(render, seed=0)
    write_manifest(real, f"{out_dir}/real")

    synth = generate_dataset(100, ConditionMix(), "synthetic", Rng(1, "synth"), render, progress=True)
    write_manifest(synth, f"{out_dir}/synth")
    print(f"{len(real)} real_analog and {len(synth)} synthetic samples in {out_dir}/")
