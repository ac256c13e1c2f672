"""Error-energy diagnostics for the last layer of a classifier.

For softmax estimates ``yhat`` and one-hot labels ``y`` the batch error energy
``phi = E_N[sum_j (yhat_j - y_j)**2]`` splits into the estimate energy
``E_N[yhat yhat^T]``, the label energy ``E_N[y y^T]`` (always 1) and twice the
cross term ``E_N[yhat y^T]``.
"""

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, StateError, TelemetryInvariantError, UndefinedFractionError
from .tensor import reduce_stats


class Decomposition(NamedTuple):
    phi_total: float
    e_est: float
    e_lab: float
    e_cross: float


@dataclass
class EnergyReport:
    step: int
    phi_total: float
    e_est: float
    e_lab: float
    e_cross: float
    noise_fraction_pct: float
    delta_prev_energy: float
    var_xL: float
    loss: float
    accuracy: float

    def as_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def energy_decomposition(probs, y):
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if probs.shape != y.shape or probs.ndim != 2:
        raise DimensionError(f"estimates {probs.shape} and labels {y.shape} must be equal N x C")
    phi = float(np.mean(np.sum((probs - y) ** 2, axis=1)))
    e_est = float(np.mean(np.sum(probs * probs, axis=1)))
    e_lab = float(np.mean(np.sum(y * y, axis=1)))
    e_cross = float(np.mean(np.sum(probs * y, axis=1)))
    return Decomposition(phi, e_est, e_lab, e_cross)


def phi_from_deltas(bt):
    """Total error energy from the last-layer deltas: ``sum_j E_N[(N delta_j)**2]``."""
    d = bt.delta_last
    n = d.shape[0]
    return float(np.sum(np.mean((n * d) ** 2, axis=0)))


def noise_fraction(report):
    """Estimate energy as a percentage of the total error energy."""
    if report.phi_total <= 0:
        raise UndefinedFractionError("noise fraction is undefined when the error energy is zero")
    return 100.0 * report.e_est / report.phi_total


def estimate_energy_bounds(n_classes):
    return 1.0 / n_classes, 1.0


def boundary_error_energy(bt):
    """Mean squared element of the error reaching the layer below the head."""
    if not bt.has_prev_layer or bt.delta_prev is None:
        raise StateError("network has no layer below the head")
    return float(np.mean(bt.delta_prev**2))


def track_var_xL(trace, history):
    history.append(reduce_stats(trace.x_last).variance)
    return history


def make_report(step, trace, bt, y, labels, var_xL=None, loss=None):
    from .network import accuracy, ce_loss_from_trace

    dec = energy_decomposition(trace.probs, y)
    try:
        nf = noise_fraction(dec)
    except UndefinedFractionError:
        nf = float("nan")
    return EnergyReport(
        step=step,
        phi_total=dec.phi_total,
        e_est=dec.e_est,
        e_lab=dec.e_lab,
        e_cross=dec.e_cross,
        noise_fraction_pct=nf,
        delta_prev_energy=boundary_error_energy(bt) if bt.has_prev_layer else float("nan"),
        var_xL=reduce_stats(trace.x_last).variance if var_xL is None else var_xL,
        loss=ce_loss_from_trace(trace, y) if loss is None else loss,
        accuracy=accuracy(trace.probs, labels),
    )


def check_invariants(report, n_classes, tol=1e-12):
    """Raise if a report breaks the decomposition identity or any bound."""
    problems = []
    identity = report.e_est + report.e_lab - 2 * report.e_cross
    if abs(report.phi_total - identity) > tol * max(1.0, abs(report.phi_total)) * 10:
        problems.append(f"phi {report.phi_total!r} != components {identity!r}")
    if not -tol <= report.phi_total <= 2 + tol:
        problems.append(f"phi {report.phi_total!r} outside [0, 2]")
    lo, hi = estimate_energy_bounds(n_classes)
    if not lo - tol <= report.e_est <= hi + tol:
        problems.append(f"estimate energy {report.e_est!r} outside [{lo}, {hi}]")
    if abs(report.e_lab - 1.0) > tol:
        problems.append(f"label energy {report.e_lab!r} != 1")
    if not -tol <= report.e_cross <= 1 + tol:
        problems.append(f"cross energy {report.e_cross!r} outside [0, 1]")
    if problems:
        raise TelemetryInvariantError(f"step {report.step}: " + "; ".join(problems))
