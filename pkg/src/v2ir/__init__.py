"""Top-level package for v2ir."""

__version__ = "0.1.0"


from v2ir.configs import SweepSpec, TrainConfig
from v2ir.datapipe import Dataset, Image, MixSpec, Sample, mix, split_by_condition
from v2ir.evaluation import SweepRunner, SweepTable, evaluate, run_sweep
from v2ir.reporting import Reporter, emit_report
from v2ir.synthcam import Condition, ConditionMix, generate_dataset, selective_gaussian_blur
from v2ir.trainer import load_checkpoint, save_checkpoint, train_cgan, train_cyclegan
