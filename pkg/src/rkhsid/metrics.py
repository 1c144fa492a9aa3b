"""Evaluation metrics: normalized state error, coefficient error, support stats."""

from dataclasses import dataclass

import numpy as np

from .errors import RKHSIDError

__all__ = [
    "UndefinedMetricError",
    "MetricReport",
    "state_error",
    "coeff_error",
    "support_stats",
]


class UndefinedMetricError(RKHSIDError):
    """The metric's normalizer vanishes (constant coordinate, zero truth)."""


@dataclass
class MetricReport:
    e_x: float = None
    e_x_printed: float = None
    e_theta: float = None
    support_exact: bool = None
    support_precision: float = None
    support_recall: float = None

    def as_dict(self) -> dict:
        return {
            "e_x": self.e_x,
            "e_x_printed": self.e_x_printed,
            "e_theta": self.e_theta,
            "support_exact": self.support_exact,
            "support_precision": self.support_precision,
            "support_recall": self.support_recall,
        }


def state_error(x_hat: np.ndarray, x_true: np.ndarray, times: np.ndarray,
                coords=None) -> tuple:
    """Variance-normalized trajectory error on a dense evaluation grid.

    Per coordinate the squared error integral is divided by the integral
    of the squared deviation from the time average; the reported value
    averages these dimensionless ratios over coordinates and takes the
    square root.  The raw variant with an extra 1/T factor inside the
    square is returned alongside (the mean predictor then no longer
    scores 1, which is why the normalized convention is primary).

    Returns (e_x, e_x_printed).
    """
    x_hat = np.asarray(x_hat, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    times = np.asarray(times, dtype=float)
    if x_hat.shape != x_true.shape:
        raise ValueError(f"shape mismatch {x_hat.shape} vs {x_true.shape}")
    if coords is not None:
        x_hat = x_hat[:, list(coords)]
        x_true = x_true[:, list(coords)]
    span = float(times[-1] - times[0])
    d = x_true.shape[1]
    ratios = []
    for m in range(d):
        xm = x_true[:, m]
        mean = np.trapezoid(xm, times) / span
        denom = np.trapezoid((mean - xm) ** 2, times)
        if denom <= 0:
            raise UndefinedMetricError(f"coordinate {m} has zero variance across time")
        num = np.trapezoid((x_hat[:, m] - xm) ** 2, times)
        ratios.append(num / denom)
    mean_ratio = float(np.mean(ratios))
    return float(np.sqrt(mean_ratio)), float(np.sqrt(mean_ratio / span))


def coeff_error(theta_hat: np.ndarray, theta_true: np.ndarray) -> float:
    """Relative Frobenius error ||theta_hat - theta_true||_F / ||theta_true||_F."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    theta_true = np.asarray(theta_true, dtype=float)
    if theta_hat.shape != theta_true.shape:
        raise ValueError(f"shape mismatch {theta_hat.shape} vs {theta_true.shape}")
    denom = np.linalg.norm(theta_true)
    if denom == 0:
        raise UndefinedMetricError("true coefficient matrix is zero")
    return float(np.linalg.norm(theta_hat - theta_true) / denom)


def support_stats(theta_hat: np.ndarray, theta_true: np.ndarray) -> tuple:
    """Exact-match flag, precision, and recall of the nonzero patterns."""
    est = np.asarray(theta_hat) != 0
    true = np.asarray(theta_true) != 0
    if est.shape != true.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {true.shape}")
    if not np.any(true):
        raise UndefinedMetricError("true support is empty")
    tp = int(np.sum(est & true))
    n_est = int(np.sum(est))
    n_true = int(np.sum(true))
    precision = tp / n_est if n_est else 1.0
    recall = tp / n_true
    return bool(np.array_equal(est, true)), float(precision), float(recall)
