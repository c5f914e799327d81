"""Activity decisions, channel estimates and data detection.

Turns a posterior-mean estimate of the composite vector into a detected
support (per-device energy threshold equivalent to the log-likelihood
ratio test), channel estimates on that support, and MMSE-plus-quantization
data symbol decisions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ep_core import EpTrace

__all__ = [
    "EstimationResult",
    "aud_threshold",
    "detect_active",
    "mmse_data_detect",
    "quantize",
]


def aud_threshold(alpha_n, v_nn):
    """Per-device activity threshold on |g_hat|^2.

        theta = log(1 + alpha/V) / (1/V - 1/(alpha + V))

    Deciding active iff |g_hat|^2 >= theta is equivalent to a nonnegative
    log-likelihood ratio between the active (variance alpha + V) and
    inactive (variance V) hypotheses for the estimate.  Elementwise on
    arrays; both arguments must be strictly positive.
    """
    alpha_n = np.asarray(alpha_n, dtype=float)
    v_nn = np.asarray(v_nn, dtype=float)
    if np.any(alpha_n <= 0.0) or not np.all(np.isfinite(alpha_n)):
        raise ValueError("alpha must be finite and > 0")
    if np.any(v_nn <= 0.0) or not np.all(np.isfinite(v_nn)):
        raise ValueError("estimate variance must be finite and > 0")
    theta = np.log1p(alpha_n / v_nn) / (1.0 / v_nn - 1.0 / (alpha_n + v_nn))
    return float(theta) if theta.ndim == 0 else theta


def detect_active(g_hat: np.ndarray, var_diag: np.ndarray, alpha: np.ndarray):
    """Threshold each entry of g_hat; boundary |g|^2 == theta counts active.

    Returns (support, h_hat): sorted indices declared active and the
    corresponding entries of g_hat, which double as the channel estimates.
    """
    g_hat = np.asarray(g_hat)
    theta = aud_threshold(alpha, var_diag)
    support = np.flatnonzero(np.abs(g_hat) ** 2 >= theta)
    return support, g_hat[support]


def quantize(z: complex, alphabet: np.ndarray):
    """Nearest alphabet symbol in Euclidean distance; ties -> lowest index."""
    alphabet = np.asarray(alphabet)
    if alphabet.size == 0:
        raise ValueError("alphabet must be non-empty")
    return complex(alphabet[int(np.argmin(np.abs(np.asarray(z) - alphabet)))])


def _quantize_rows(z: np.ndarray, alphabet: np.ndarray) -> np.ndarray:
    # vectorized nearest-symbol over a matrix; argmin keeps the tie-break
    idx = np.argmin(np.abs(z[..., None] - alphabet[None, None, :]), axis=-1)
    return alphabet[idx]


def mmse_data_detect(spreading: np.ndarray, support_hat: np.ndarray, h_hat: np.ndarray,
                     y_data: np.ndarray, noise_var: float, tx_power_lin: float,
                     alphabet: np.ndarray, paper_literal_reg: bool = False) -> np.ndarray:
    """Linear MMSE detection plus quantization for the declared-active set.

    The effective channel matrix has columns s_n * h_hat_n for n in the
    estimated support; each data snapshot is equalized by
    (L^H L + lambda I)^{-1} L^H y and quantized on the unit-power alphabet,
    then rescaled by sqrt(tx_power_lin).  The regularizer defaults to
    noise_var / tx_power_lin, matching the unit-power symbol statistics;
    paper_literal_reg=True uses lambda = noise_var instead.

    Returns the |support| x J matrix of detected symbols at transmit scale;
    empty support yields an empty (0, J) matrix.
    """
    support_hat = np.asarray(support_hat, dtype=int)
    y_data = np.asarray(y_data, dtype=complex)
    j = y_data.shape[1]
    if support_hat.size == 0:
        return np.zeros((0, j), dtype=complex)
    ell = spreading[:, support_hat] * np.asarray(h_hat)[None, :]
    k = support_hat.size
    lam = noise_var if paper_literal_reg else noise_var / tx_power_lin
    gram = ell.conj().T @ ell + lam * np.eye(k)
    est = np.linalg.solve(gram, ell.conj().T @ y_data)   # estimates sqrt(rho) * symbols
    scale = np.sqrt(tx_power_lin)
    return _quantize_rows(est / scale, np.asarray(alphabet, dtype=complex)) * scale


@dataclass(frozen=True)
class EstimationResult:
    """Output of one estimator run on one frame, as consumed by metrics.

    support_hat holds the sorted indices the algorithm declared active;
    h_hat the channel estimates for exactly those devices; x_hat the
    detected data symbols (|support| x J, transmit scale).
    """

    g_hat: np.ndarray
    var_diag: Optional[np.ndarray]
    support_hat: np.ndarray
    h_hat: np.ndarray
    x_hat: np.ndarray
    trace: Optional[EpTrace] = None

    def net_channel_estimate(self) -> np.ndarray:
        """Length-N estimate with zeros wherever the device was declared inactive."""
        out = np.zeros_like(np.asarray(self.g_hat))
        out[self.support_hat] = self.h_hat
        return out
