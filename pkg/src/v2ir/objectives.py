"""Adversarial, reconstruction and cycle losses, and the percent L1 metric."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from v2ir.numerics import Tensor, log_clamped
from v2ir.utils import NumericalError

G_ADV_MODES = ("minimax", "non_saturating")


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 100.0
    lambda_cyc: float = 10.0
    g_adv_mode: str = "non_saturating"

    def __post_init__(self):
        self.validate_weights()
        self.validate_mode()

    def validate_weights(self):
        for name in ("lambda_l1", "lambda_cyc"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

    def validate_mode(self):
        if self.g_adv_mode not in G_ADV_MODES:
            raise ValueError(f"g_adv_mode must be one of {G_ADV_MODES}")


@dataclass
class LossReport:
    """
    Losses of one step (or the mean over an epoch).

    ``g_l1``, ``cyc_ab`` and ``cyc_ba`` hold the weighted terms, so
    ``g_total`` is exactly the minimized generator objective.
    """

    d_loss: float = 0.0
    g_adv: float = 0.0
    g_l1: float = 0.0
    cyc_ab: float = 0.0
    cyc_ba: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value):
                raise NumericalError(f"non-finite {name} loss: {value}")

    @property
    def g_total(self):
        return self.g_adv + self.g_l1 + self.cyc_ab + self.cyc_ba

    @property
    def cycle(self):
        return self.cyc_ab + self.cyc_ba

    def as_dict(self):
        return asdict(self)


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_probabilities(t, name):
    if np.any(t.data < 0) or np.any(t.data > 1):
        raise ValueError(f"{name} values must lie in [0, 1]")


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def d_loss(d_real, d_fake):
    """Discriminator loss: -mean log D(real) - mean log(1 - D(fake))."""
    d_real, d_fake = _as_tensor(d_real), _as_tensor(d_fake)
    _check_probabilities(d_real, "d_real")
    _check_probabilities(d_fake, "d_fake")
    return -log_clamped(d_real).mean() - log_clamped(1 - d_fake).mean()


def g_adv_loss(d_fake, mode="non_saturating"):
    d_fake = _as_tensor(d_fake)
    if mode not in G_ADV_MODES:
        raise ValueError(f"unknown generator loss mode {mode!r}")
    _check_probabilities(d_fake, "d_fake")
    if mode == "minimax":
        return log_clamped(1 - d_fake).mean()
    return -log_clamped(d_fake).mean()


def l1_term(y_hat, y):
    y_hat, y = _as_tensor(y_hat), _as_tensor(y)
    _check_same_shape(y_hat, y, "l1_term")
    return (y_hat - y).abs().mean()


def l1_metric_percent(y_hat, y):
    """100 x mean absolute difference of two images on the [0, 1] scale."""
    y_hat = np.asarray(y_hat.data if isinstance(y_hat, Tensor) else y_hat, dtype=np.float64)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"l1_metric_percent: shape mismatch {y_hat.shape} vs {y.shape}")
    return float(100.0 * np.mean(np.abs(y_hat - y)))


def cycle_parts(x, x_rec, y, y_rec, lambda_cyc):
    """Weighted forward (x side) and backward (y side) cycle penalties."""
    return lambda_cyc * l1_term(x, x_rec), lambda_cyc * l1_term(y, y_rec)


def cycle_term(x, x_rec, y, y_rec, lambda_cyc):
    forward, backward = cycle_parts(x, x_rec, y, y_rec, lambda_cyc)
    return forward + backward


def cgan_g_terms(d_fake, y_hat, y, weights):
    return g_adv_loss(d_fake, weights.g_adv_mode), weights.lambda_l1 * l1_term(y_hat, y)


def cgan_g_objective(d_fake, y_hat, y, weights):
    """Conditional generator objective: adversarial term plus weighted L1."""
    adv, l1 = cgan_g_terms(d_fake, y_hat, y, weights)
    return adv + l1
