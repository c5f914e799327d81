"""Expectation-propagation estimator for the sparse pilot problem.

The target is the posterior of the composite vector g (activity times
channel) under y = Phi g + w with an independent spike-and-slab prior per
coordinate: (1 - p_n) delta(g_n) + p_n CN(g_n | 0, alpha_n).  The posterior
is approximated by a full complex Gaussian q(g) = CN(g | m, V) whose
non-Gaussian prior factors are replaced by per-coordinate Gaussian sites
refined via KL moment matching.

Numerical conventions
---------------------
* The global refresh always uses the low-rank (M x M inner solve) identity

      V = V2 - V2 Phi^H (sigma^2 I + Phi V2 Phi^H)^{-1} Phi V2,

  factorized by Cholesky; cost O(M N^2).
* `run_ep` iterates in prior-whitened coordinates u = g / sqrt(alpha)
  (slab variance 1 per coordinate), which makes the stopping threshold and
  the site-variance floor scale-free, and maps the result back to g.  The
  update equations are exactly covariant under this diagonal rescaling, so
  the iterates equal the unwhitened ones up to floating-point rounding.
* Convergence is measured as the root-mean-square per-device change of the
  whitened posterior mean; with unit channel variances this is the l2 norm
  of the mean change divided by sqrt(N).
* Invalid cavity or site variances (the classic EP failure mode) cause the
  site to be skipped for that iteration, keeping its previous parameters.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg

from .gaussian import ScalarGaussian

__all__ = [
    "EpConfig",
    "LikelihoodFactor",
    "EpState",
    "EpTrace",
    "EpIterationRecord",
    "SiteMoments",
    "EpOutput",
    "init_state",
    "global_update",
    "cavity",
    "site_moments",
    "moment_match",
    "damp",
    "run_ep",
]


@dataclass(frozen=True)
class EpConfig:
    """Knobs of the EP estimator.

    The stopping threshold `tol` and the site-variance floor act on the
    prior-whitened scale (per-device channel standard deviations), so they
    are meaningful regardless of absolute channel powers.  `schedule` is
    "sequential" (each site update sees the freshest global marginals) or
    "parallel" (all sites updated against one frozen global per iteration).
    """

    max_iters: int = 10
    tol: float = 1e-4
    damping: float = 0.9
    min_site_variance: float = 1e-12
    schedule: str = "sequential"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.tol > 0.0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if not 0.0 <= self.damping <= 1.0:
            raise ValueError(f"damping must be in [0, 1], got {self.damping}")
        if not self.min_site_variance > 0.0:
            raise ValueError(f"min_site_variance must be > 0, got {self.min_site_variance}")
        if self.schedule not in ("sequential", "parallel"):
            raise ValueError(f"schedule must be 'sequential' or 'parallel', got {self.schedule!r}")


class LikelihoodFactor:
    """Natural parameters of the Gaussian observation factor.

    Holds Phi, y and the noise variance together with the cached Gram matrix
    Phi^H Phi and projection Phi^H y.  The factor is only ever consumed in
    the combined global-update form; its own mean/covariance pair is never
    materialized (the Gram matrix is singular whenever M < N).
    """

    def __init__(self, phi: np.ndarray, y: np.ndarray, noise_var: float):
        phi = np.asarray(phi, dtype=complex)
        y = np.asarray(y, dtype=complex)
        if phi.ndim != 2:
            raise ValueError(f"phi must be a matrix, got shape {phi.shape}")
        if y.shape != (phi.shape[0],):
            raise ValueError(f"y has shape {y.shape}, expected ({phi.shape[0]},)")
        if not (np.isfinite(noise_var) and noise_var > 0.0):
            raise ValueError(f"noise_var must be finite and > 0, got {noise_var}")
        self.phi = phi
        self.y = y
        self.noise_var = float(noise_var)
        self.gram = phi.conj().T @ phi
        self.proj = phi.conj().T @ y

    @property
    def shape(self):
        return self.phi.shape


class EpIterationRecord(NamedTuple):
    iteration: int
    mean_delta: float
    nmse: Optional[float]
    skipped_sites: int


@dataclass
class EpTrace:
    """Per-iteration convergence record of one EP run."""

    records: list = field(default_factory=list)
    converged: bool = False
    all_sites_skipped: bool = False

    def append(self, rec: EpIterationRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("iteration indices must be strictly increasing")
        self.records.append(rec)

    @property
    def n_iterations(self) -> int:
        return len(self.records)

    def mean_deltas(self) -> np.ndarray:
        return np.array([r.mean_delta for r in self.records])

    def nmse_values(self) -> np.ndarray:
        return np.array([np.nan if r.nmse is None else r.nmse for r in self.records])


@dataclass
class EpState:
    """Site parameters plus the implied global Gaussian."""

    site_mean: np.ndarray       # (N,) complex
    site_var: np.ndarray        # (N,) float, each >= min_site_variance
    global_mean: np.ndarray     # (N,) complex
    global_var_diag: np.ndarray  # (N,) float
    global_cov: np.ndarray      # (N, N) complex Hermitian
    iteration: int = 0
    mean_delta: float = np.inf
    skipped_sites: int = 0


def global_update(lf: LikelihoodFactor, site_mean: np.ndarray, site_var: np.ndarray):
    """Global Gaussian (mean, covariance) implied by the current sites.

    Uses the M x M inner-solve identity; the inner matrix
    sigma^2 I + Phi V2 Phi^H is Hermitian positive definite for any
    sigma^2 > 0 and is factorized by Cholesky.
    """
    phi = lf.phi
    m_dim = phi.shape[0]
    site_mean = np.asarray(site_mean, dtype=complex)
    site_var = np.asarray(site_var, dtype=float)
    w = phi * site_var[None, :]                      # Phi V2
    inner = lf.noise_var * np.eye(m_dim) + w @ phi.conj().T
    inner = 0.5 * (inner + inner.conj().T)
    try:
        cho = scipy.linalg.cho_factor(inner, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:  # cannot occur for sigma^2 > 0
        raise FloatingPointError(f"inner EP system not positive definite: {exc}") from exc
    cov = np.diag(site_var) - w.conj().T @ scipy.linalg.cho_solve(cho, w, check_finite=False)
    cov = 0.5 * (cov + cov.conj().T)
    eta = lf.proj / lf.noise_var + site_mean / site_var
    w_eta = w @ eta
    mean = site_var * eta - w.conj().T @ scipy.linalg.cho_solve(cho, w_eta, check_finite=False)
    return mean, cov


def _global_mean_and_diag(lf: LikelihoodFactor, site_mean: np.ndarray, site_var: np.ndarray):
    """Mean and covariance diagonal only; saves the N x N product when the
    full matrix is not needed (one factorization, O(M^2 N))."""
    phi = lf.phi
    m_dim = phi.shape[0]
    w = phi * site_var[None, :]
    inner = lf.noise_var * np.eye(m_dim) + w @ phi.conj().T
    inner = 0.5 * (inner + inner.conj().T)
    cho = scipy.linalg.cho_factor(inner, lower=True, check_finite=False)
    solved = scipy.linalg.cho_solve(cho, w, check_finite=False)
    var_diag = site_var - np.real(np.sum(w.conj() * solved, axis=0))
    eta = lf.proj / lf.noise_var + site_mean / site_var
    mean = site_var * eta - solved.conj().T @ (w @ eta)
    return mean, var_diag


def init_state(lf: LikelihoodFactor, p: np.ndarray, alpha: np.ndarray) -> EpState:
    """Initial EP state: zero site means, prior-matched site variances p*alpha."""
    p = np.asarray(p, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    n = lf.phi.shape[1]
    if p.shape != (n,) or alpha.shape != (n,):
        raise ValueError(f"p and alpha must have shape ({n},), got {p.shape} and {alpha.shape}")
    site_var = p * alpha
    if np.any(site_var <= 0.0):
        raise ValueError("p * alpha must be strictly positive")
    site_mean = np.zeros(n, dtype=complex)
    mean, cov = global_update(lf, site_mean, site_var)
    return EpState(
        site_mean=site_mean,
        site_var=site_var,
        global_mean=mean,
        global_var_diag=np.real(np.diag(cov)).copy(),
        global_cov=cov,
    )


def cavity(global_n: ScalarGaussian, site_n: ScalarGaussian) -> Optional[ScalarGaussian]:
    """Remove one site from its global marginal.

    Returns None (skip) when the cavity precision 1/V_nn - 1/v2_n is not
    positive, which happens when the site is at least as certain as the
    global marginal it is part of.
    """
    inv_prec = 1.0 / global_n.variance - 1.0 / site_n.variance
    if not (np.isfinite(inv_prec) and inv_prec > 0.0):
        return None
    var = 1.0 / inv_prec
    mean = var * (global_n.mean / global_n.variance - site_n.mean / site_n.variance)
    if not np.isfinite(var) or not np.isfinite(abs(mean)):
        return None
    return ScalarGaussian(complex(mean), float(var))


class SiteMoments(NamedTuple):
    """Moments of the tilted distribution (spike-and-slab times cavity)."""

    g0: float
    g1: complex
    g2: float
    mean: complex
    variance: float


def site_moments(cav: ScalarGaussian, p_n: float, alpha_n: float) -> Optional[SiteMoments]:
    """Zeroth/first/second moments and the matched (mean, variance).

    Closed forms, with the spike/slab mixture handled through the log-domain
    responsibility so that far-tail cavities cannot produce 0/0.  The
    returned variance is clamped at zero against rounding.  Returns None
    only if the normalizer is not representable (non-finite inputs).
    """
    if not 0.0 <= p_n <= 1.0:
        raise ValueError(f"activity probability must be in [0, 1], got {p_n}")
    if not alpha_n > 0.0:
        raise ValueError(f"alpha must be > 0, got {alpha_n}")
    m, v = cav.mean, cav.variance
    d2 = abs(m) ** 2
    # log of (1 - p) CN(0 | m, v) and of p CN(0 | m, alpha + v)
    log_spike = -np.inf if p_n == 1.0 else np.log1p(-p_n) - d2 / v - np.log(np.pi * v)
    log_slab = -np.inf if p_n == 0.0 else np.log(p_n) - d2 / (alpha_n + v) - np.log(np.pi * (alpha_n + v))
    log_g0 = np.logaddexp(log_spike, log_slab)
    if not np.isfinite(log_g0):
        return None
    slab_resp = np.exp(log_slab - log_g0)       # slab responsibility in (0, 1]
    shrink = alpha_n / (alpha_n + v)
    slab_mean = m * shrink
    mean = slab_resp * slab_mean
    second = slab_resp * (abs(slab_mean) ** 2 + shrink * v)
    var = max(second - abs(mean) ** 2, 0.0)
    g0 = np.exp(log_g0)
    g1 = g0 * mean
    g2 = g0 * second
    return SiteMoments(float(g0), complex(g1), float(g2), complex(mean), float(var))


def moment_match(mean, variance: float, cav: ScalarGaussian, *,
                 min_site_variance: float = 1e-12) -> Optional[ScalarGaussian]:
    """Site parameters making (site x cavity) match the tilted moments.

    v2 = (1/V - 1/v_cav)^{-1}, m2 = v2 (E/V - m_cav/v_cav).  Returns None
    (skip) when the implied site variance falls below the floor, is not
    finite, or is non-positive.
    """
    if variance < 0.0:
        raise ValueError(f"tilted variance must be >= 0, got {variance}")
    if variance == 0.0:
        return None
    inv_prec = 1.0 / variance - 1.0 / cav.variance
    if inv_prec <= 0.0:
        return None
    v2 = 1.0 / inv_prec
    if not np.isfinite(v2) or v2 < min_site_variance:
        return None
    m2 = v2 * (mean / variance - cav.mean / cav.variance)
    if not np.isfinite(abs(m2)):
        return None
    return ScalarGaussian(complex(m2), float(v2))


def damp(old: ScalarGaussian, new: ScalarGaussian, beta: float, *,
         min_site_variance: float = 1e-12) -> ScalarGaussian:
    """Convex blend of old and new site parameters (beta weights the new)."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    mean = beta * new.mean + (1.0 - beta) * old.mean
    var = max(beta * new.variance + (1.0 - beta) * old.variance, min_site_variance)
    return ScalarGaussian(complex(mean), float(var))


class EpOutput(NamedTuple):
    g_hat: np.ndarray
    var_diag: np.ndarray
    trace: EpTrace


def _refine_site(marg_mean, marg_var, site_mean_i, site_var_i, p_i, cfg):
    """cavity -> tilted moments (unit slab) -> moment match -> damp.

    Scalar fast path for the whitened iteration; algebraically identical to
    composing the public cavity / site_moments / moment_match / damp
    operations with alpha = 1 (pinned against them by tests).  Returns the
    damped (mean, variance) pair, or None to skip the site.
    """
    inv_prec = 1.0 / marg_var - 1.0 / site_var_i
    if not (inv_prec > 0.0 and math.isfinite(inv_prec)):
        return None
    vc = 1.0 / inv_prec
    mc = vc * (marg_mean / marg_var - site_mean_i / site_var_i)
    if not cmath.isfinite(mc):
        return None
    d2 = mc.real * mc.real + mc.imag * mc.imag
    if p_i >= 1.0:
        resp = 1.0
    elif p_i <= 0.0:
        return None  # point mass at zero: no representable site
    else:
        log_spike = math.log1p(-p_i) - d2 / vc - math.log(math.pi * vc)
        log_slab = math.log(p_i) - d2 / (1.0 + vc) - math.log(math.pi * (1.0 + vc))
        diff = log_spike - log_slab
        if diff > 700.0:
            resp = 0.0
        elif diff < -700.0:
            resp = 1.0
        else:
            resp = 1.0 / (1.0 + math.exp(diff))
    shrink = 1.0 / (1.0 + vc)
    slab_mean = mc * shrink
    e_mean = resp * slab_mean
    e2 = e_mean.real * e_mean.real + e_mean.imag * e_mean.imag
    second = resp * ((slab_mean.real ** 2 + slab_mean.imag ** 2) + shrink * vc)
    var = second - e2
    if var <= 0.0:
        return None
    inv2 = 1.0 / var - 1.0 / vc
    if inv2 <= 0.0:
        return None
    v2 = 1.0 / inv2
    if not math.isfinite(v2) or v2 < cfg.min_site_variance:
        return None
    m2 = v2 * (e_mean / var - mc / vc)
    if not cmath.isfinite(m2):
        return None
    beta = cfg.damping
    new_m = beta * m2 + (1.0 - beta) * site_mean_i
    new_v = beta * v2 + (1.0 - beta) * site_var_i
    return new_m, max(new_v, cfg.min_site_variance)


def _site_pass_parallel(lf, p, site_mean, site_var, global_mean, global_var_diag, cfg):
    """Update every site against the frozen global of this iteration."""
    n = lf.phi.shape[1]
    new_mean = site_mean.copy()
    new_var = site_var.copy()
    skipped = 0
    for i in range(n):
        upd = _refine_site(complex(global_mean[i]), float(global_var_diag[i]),
                           complex(site_mean[i]), float(site_var[i]), p[i], cfg)
        if upd is None:
            skipped += 1
            continue
        new_mean[i], new_var[i] = upd
    return new_mean, new_var, skipped


def _site_pass_sequential(lf, p, site_mean, site_var, cfg):
    """Update sites in index order, each against up-to-date marginals.

    The M x M inner inverse and the projected natural-mean vector are
    maintained incrementally (rank-one updates), so one pass costs O(N M^2);
    the caller resynchronizes the full global afterwards.
    """
    phi = lf.phi
    m_dim = phi.shape[0]
    n = phi.shape[1]
    site_mean = site_mean.copy()
    site_var = site_var.copy()
    inner = lf.noise_var * np.eye(m_dim) + (phi * site_var[None, :]) @ phi.conj().T
    inner_inv = np.linalg.inv(0.5 * (inner + inner.conj().T))
    proj_scaled = lf.proj / lf.noise_var
    eta = proj_scaled + site_mean / site_var
    s_vec = phi @ (site_var * eta)
    r_vec = inner_inv @ s_vec
    skipped = 0
    for i in range(n):
        x_i = phi[:, i]
        v_i = float(site_var[i])
        q = inner_inv @ x_i
        x_inv_x = np.vdot(x_i, q).real
        v_nn = v_i * (1.0 - v_i * x_inv_x)
        if v_nn <= 0.0:
            skipped += 1
            continue
        m_n = v_i * complex(eta[i]) - v_i * complex(np.vdot(x_i, r_vec))
        upd = _refine_site(m_n, v_nn, complex(site_mean[i]), v_i, p[i], cfg)
        if upd is None:
            skipped += 1
            continue
        new_m, new_v = upd
        dv = new_v - v_i
        denom = 1.0 + dv * x_inv_x
        if denom <= 0.0 or not math.isfinite(denom):  # keep inner matrix PD
            skipped += 1
            continue
        # rank-one Sherman-Morrison refresh of the inner inverse, s and r
        coef = dv / denom
        q_dot_s = complex(np.vdot(q, s_vec))
        old_nat = v_i * complex(eta[i])
        eta[i] = proj_scaled[i] + new_m / new_v
        d_nat = new_v * complex(eta[i]) - old_nat
        s_vec += x_i * d_nat
        r_vec += (d_nat - coef * (q_dot_s + d_nat * x_inv_x)) * q
        inner_inv -= (coef * q)[:, None] * q.conj()[None, :]
        site_mean[i], site_var[i] = new_m, new_v
    return site_mean, site_var, skipped


def run_ep(lf: LikelihoodFactor, p: np.ndarray, alpha: np.ndarray,
           cfg: EpConfig = EpConfig(), truth: Optional[np.ndarray] = None) -> EpOutput:
    """Iterate EP to approximate the posterior of the composite vector.

    Returns the posterior mean estimate g_hat, the diagonal of the posterior
    covariance, and the per-iteration trace (mean_delta, NMSE against
    `truth` when given, skipped-site counts).  Deterministic: the site order
    within an iteration is fixed, so identical inputs give identical output
    regardless of how many runs execute concurrently.
    """
    p = np.asarray(p, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    n = lf.phi.shape[1]
    if p.shape != (n,) or alpha.shape != (n,):
        raise ValueError(f"p and alpha must have shape ({n},), got {p.shape} and {alpha.shape}")
    if np.any(alpha <= 0.0) or np.any(p <= 0.0):
        raise ValueError("p and alpha entries must be strictly positive")

    # whitened problem: columns scaled by channel std, unit slab variances
    sqrt_alpha = np.sqrt(alpha)
    lf_w = LikelihoodFactor(lf.phi * sqrt_alpha[None, :], lf.y, lf.noise_var)
    site_mean = np.zeros(n, dtype=complex)
    site_var = p.copy()
    mean, var_diag = _global_mean_and_diag(lf_w, site_mean, site_var)
    truth_w = None
    truth_norm2 = 0.0
    if truth is not None:
        truth_w = np.asarray(truth, dtype=complex) / sqrt_alpha
        truth_norm2 = float(np.linalg.norm(truth_w) ** 2)

    trace = EpTrace()
    rms_scale = 1.0 / np.sqrt(n)
    for it in range(1, cfg.max_iters + 1):
        prev_mean = mean
        if cfg.schedule == "sequential":
            site_mean, site_var, skipped = _site_pass_sequential(lf_w, p, site_mean, site_var, cfg)
        else:
            site_mean, site_var, skipped = _site_pass_parallel(
                lf_w, p, site_mean, site_var, mean, var_diag, cfg)
        mean, var_diag = _global_mean_and_diag(lf_w, site_mean, site_var)
        mean_delta = float(np.linalg.norm(mean - prev_mean)) * rms_scale
        nmse = None
        if truth_w is not None and truth_norm2 > 0.0:
            nmse = float(np.linalg.norm(mean - truth_w) ** 2 / truth_norm2)
        trace.append(EpIterationRecord(it, mean_delta, nmse, skipped))
        if skipped == n:
            trace.all_sites_skipped = True
            break
        if mean_delta < cfg.tol:
            trace.converged = True
            break

    return EpOutput(mean * sqrt_alpha, var_diag * alpha, trace)
