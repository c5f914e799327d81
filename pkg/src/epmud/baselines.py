"""Reference estimators for the pilot problem y = Phi g + w.

OMP (greedy correlation + least-squares refit), soft-threshold AMP with the
Onsager residual correction, and the support-aware Oracle LMMSE lower bound.
OMP and AMP are non-Bayesian: they never see the activity probabilities or
channel variances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

__all__ = [
    "BaselineConfig",
    "AmpResult",
    "soft_threshold",
    "omp_estimate",
    "amp_estimate",
    "oracle_mmse",
]


@dataclass(frozen=True)
class BaselineConfig:
    """Stopping rules and thresholds for the reference estimators.

    omp_max_atoms=None means "three times the expected number of active
    devices", which the caller resolves since the baselines themselves do
    not see activity probabilities.
    """

    omp_max_atoms: Optional[int] = None
    omp_residual_factor: float = 1.0
    amp_max_iters: int = 30
    amp_threshold_mult: float = 1.4
    amp_damping: float = 0.7

    def __post_init__(self):
        if self.omp_max_atoms is not None and self.omp_max_atoms < 1:
            raise ValueError(f"omp_max_atoms must be >= 1, got {self.omp_max_atoms}")
        if self.omp_residual_factor <= 0.0:
            raise ValueError("omp_residual_factor must be > 0")
        if self.amp_max_iters < 1:
            raise ValueError("amp_max_iters must be >= 1")
        if self.amp_threshold_mult <= 0.0:
            raise ValueError("amp_threshold_mult must be > 0")
        if not 0.0 <= self.amp_damping <= 1.0:
            raise ValueError("amp_damping must be in [0, 1]")


def omp_estimate(phi: np.ndarray, y: np.ndarray, noise_var: float,
                 cfg: BaselineConfig = BaselineConfig()):
    """Orthogonal matching pursuit with a residual-power stopping rule.

    Greedily selects the column most correlated with the residual
    (normalized by column norm), least-squares refits on the selected set,
    and stops once ||r||^2 <= omp_residual_factor * M * noise_var or the
    atom budget is reached.  Entries off the selected support are exactly
    zero.  Returns (g_hat, support) with the support sorted.
    """
    phi = np.asarray(phi, dtype=complex)
    y = np.asarray(y, dtype=complex)
    m, n = phi.shape
    norms = np.linalg.norm(phi, axis=0)
    if np.any(norms == 0.0):
        raise ValueError("phi must have nonzero columns")
    max_atoms = cfg.omp_max_atoms if cfg.omp_max_atoms is not None else m
    max_atoms = min(max_atoms, m, n)
    target = cfg.omp_residual_factor * m * noise_var

    g_hat = np.zeros(n, dtype=complex)
    selected: list[int] = []
    coef = np.zeros(0, dtype=complex)
    residual = y.copy()
    while np.linalg.norm(residual) ** 2 > target and len(selected) < max_atoms:
        scores = np.abs(phi.conj().T @ residual) / norms
        if selected:
            scores[selected] = -1.0
        pick = int(np.argmax(scores))
        sub = phi[:, selected + [pick]]
        coef_new, _, rank, _ = np.linalg.lstsq(sub, y, rcond=None)
        if rank < len(selected) + 1:
            break  # rank-deficient refit: keep the previous estimate
        selected.append(pick)
        coef = coef_new
        residual = y - sub @ coef
    if selected:
        g_hat[selected] = coef
    return g_hat, np.array(sorted(selected), dtype=int)


def soft_threshold(z, thresh: float):
    """Complex soft threshold: shrink magnitude by thresh, keep the phase."""
    z = np.asarray(z)
    mag = np.abs(z)
    return z * (np.maximum(mag - thresh, 0.0) / np.maximum(mag, np.finfo(float).tiny))


class AmpResult(NamedTuple):
    g_hat: np.ndarray
    support: np.ndarray
    diverged: bool


def amp_estimate(phi: np.ndarray, y: np.ndarray, noise_var: float,
                 cfg: BaselineConfig = BaselineConfig()) -> AmpResult:
    """Soft-threshold AMP with the Onsager residual correction.

    Iterates x <- eta(x + A^H r; tau * sigma_t) and
    r <- y - A x + (||x||_0 / M) r_prev with sigma_t = ||r|| / sqrt(M), on
    the column-normalized matrix A (the estimate is mapped back to the
    original column scaling at exit).  Only the residual recursion is
    damped so the iterate keeps exact zeros.  If the residual scale grows
    past 10x its starting value the best iterate seen so far is returned
    with the diverged flag set.
    """
    phi = np.asarray(phi, dtype=complex)
    y = np.asarray(y, dtype=complex)
    m = phi.shape[0]
    norms = np.linalg.norm(phi, axis=0)
    if np.any(norms == 0.0):
        raise ValueError("phi must have nonzero columns")
    a = phi / norms[None, :]

    x = np.zeros(phi.shape[1], dtype=complex)
    residual = y.copy()
    sigma0 = np.linalg.norm(residual) / np.sqrt(m)
    best_res2, best_x = np.inf, x.copy()
    diverged = False
    for _ in range(cfg.amp_max_iters):
        res2 = float(np.linalg.norm(residual) ** 2)
        if res2 < best_res2:
            best_res2, best_x = res2, x.copy()
        sigma_t = np.sqrt(res2 / m)
        if sigma0 > 0.0 and sigma_t > 10.0 * sigma0:
            diverged = True
            break
        x = soft_threshold(x + a.conj().T @ residual, cfg.amp_threshold_mult * sigma_t)
        onsager = (np.count_nonzero(x) / m) * residual
        residual_new = y - a @ x + onsager
        residual = cfg.amp_damping * residual_new + (1.0 - cfg.amp_damping) * residual
    if diverged:
        x = best_x
    g_hat = x / norms
    return AmpResult(g_hat, np.flatnonzero(x), diverged)


def oracle_mmse(phi: np.ndarray, y: np.ndarray, true_support, alpha: np.ndarray,
                noise_var: float) -> np.ndarray:
    """LMMSE estimate given the true support (performance lower bound).

    On the support: C P^H (P C P^H + sigma^2 I)^{-1} y with C the diagonal
    of channel variances restricted to the support; exact zeros elsewhere.
    """
    phi = np.asarray(phi, dtype=complex)
    y = np.asarray(y, dtype=complex)
    alpha = np.asarray(alpha, dtype=float)
    support = np.asarray(true_support, dtype=int)
    g_hat = np.zeros(phi.shape[1], dtype=complex)
    if support.size == 0:
        return g_hat
    if np.any(alpha[support] <= 0.0):
        raise ValueError("channel variances on the support must be > 0")
    sub = phi[:, support]
    c_sub = alpha[support]
    cov = (sub * c_sub[None, :]) @ sub.conj().T + noise_var * np.eye(phi.shape[0])
    g_hat[support] = c_sub * (sub.conj().T @ np.linalg.solve(cov, y))
    return g_hat
