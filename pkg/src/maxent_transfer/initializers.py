"""Weight initialization: He variance scaling and maximum-entropy heads."""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import normal_sample

KINDS = ("he_fan_in", "he_fan_out", "mei", "zeros")


def he_variance(fan, m=2.0):
    """Variance ``m / fan``; ``m = 2`` for ReLU networks."""
    if fan < 1:
        raise ValueError(f"fan must be a positive integer, got {fan}")
    if m <= 0:
        raise ValueError(f"gain m must be positive, got {m}")
    return m / fan


def mei_variance(gamma, lam, n_classes):
    """Per-weight energy ``gamma**2 * lam**2 / C**2`` of a maximum-entropy head."""
    if gamma <= 0 or lam <= 0:
        raise ValueError("gamma and lambda must both be positive; a zero head never breaks symmetry")
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    return gamma**2 * lam**2 / n_classes**2


def lambda_for_phi_w(phi_w, gamma, n_classes):
    """The lambda that makes ``mei_variance(gamma, lambda, C) == phi_w``."""
    if phi_w <= 0:
        raise ValueError(f"phi_w must be positive, got {phi_w}")
    return n_classes * math.sqrt(phi_w) / gamma


@dataclass(frozen=True)
class InitSpec:
    kind: str
    m: float = 2.0
    gamma: float = 1e-4
    lam: float = None
    n_classes: int = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown init kind {self.kind!r}; expected one of {KINDS}")
        if self.kind.startswith("he") and self.m <= 0:
            raise ValueError("He init needs m > 0")
        if self.kind == "mei":
            if self.lam is None or self.n_classes is None:
                raise ValueError("mei init needs lam and n_classes")
            mei_variance(self.gamma, self.lam, self.n_classes)

    @classmethod
    def mei(cls, n_classes, gamma=1e-4, lam=None, phi_w=1e-12):
        """MEI spec from either ``lam`` or a target ``phi_w`` (``lam`` wins)."""
        if lam is None:
            lam = lambda_for_phi_w(phi_w, gamma, n_classes)
        return cls("mei", gamma=gamma, lam=lam, n_classes=n_classes)

    def variance(self, fan_in, fan_out):
        if self.kind == "he_fan_in":
            return he_variance(fan_in, self.m)
        if self.kind == "he_fan_out":
            return he_variance(fan_out, self.m)
        if self.kind == "mei":
            return mei_variance(self.gamma, self.lam, self.n_classes)
        return 0.0


def apply_init(layer, spec, rng):
    """Copy of a dense ``layer`` with ``W ~ N(0, var)`` and ``b = 0``."""
    from .network import Dense

    if not isinstance(layer, Dense):
        raise ValueError(f"can only initialize dense layers, got {layer.kind}")
    if spec.kind == "mei" and spec.n_classes != layer.fan_out:
        raise ValueError(
            f"mei spec is for {spec.n_classes} classes but the layer has {layer.fan_out} outputs"
        )
    var = spec.variance(layer.fan_in, layer.fan_out)
    W = normal_sample(rng, (layer.fan_out, layer.fan_in), 0.0, var)
    return Dense(W, np.zeros((1, layer.fan_out)), tag=layer.tag)
