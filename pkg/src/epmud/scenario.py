"""Synthetic mMTC frame generation.

A frame: N devices scattered in a disk cell, a Bernoulli activity draw,
Rayleigh-faded channels with distance pathloss, unit-norm random spreading
sequences, one pilot observation vector and J data observation vectors.

Power bookkeeping: everything is carried in linear milliwatts internally;
dBm / dB appear only at the configuration boundary.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .ep_core import EpConfig
from .gaussian import sample_cn

__all__ = [
    "QPSK",
    "BPSK",
    "SystemConfig",
    "Instance",
    "pathloss_variance",
    "noise_variance",
    "generate_instance",
    "derive_stream",
]

# Unit-average-power alphabets. Index order is the quantizer tie-break order.
QPSK = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / np.sqrt(2.0)
BPSK = np.array([1 + 0j, -1 + 0j])

# Stream purposes; each consumer owns a tag so adding a consumer never
# perturbs the draws of existing ones.
_PURPOSES = {
    "placement": 0,
    "activity": 1,
    "channels": 2,
    "spreading": 3,
    "symbols": 4,
    "pilot_noise": 5,
    "data_noise": 6,
}


def derive_stream(seed: int, trial_index: int, purpose: str) -> np.random.Generator:
    """Child random stream for one (seed, trial, purpose) triple.

    Streams for distinct triples are statistically independent, and the
    mapping is stable across library versions (fixed purpose tags).
    """
    if trial_index < 0:
        raise ValueError(f"trial_index must be >= 0, got {trial_index}")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(trial_index), _PURPOSES[purpose]])
    return np.random.default_rng(ss)


def pathloss_variance(d_km) -> float:
    """Linear channel power at distance d_km.

    dB law: -128.1 - 36.7 log10(d) with d in km; returned in linear scale.
    Strictly decreasing in distance.
    """
    d_km = np.asarray(d_km, dtype=float)
    if np.any(d_km <= 0.0) or not np.all(np.isfinite(d_km)):
        raise ValueError(f"distance must be finite and > 0 km, got {d_km}")
    alpha_db = -128.1 - 36.7 * np.log10(d_km)
    out = 10.0 ** (alpha_db / 10.0)
    return float(out) if out.ndim == 0 else out


def noise_variance(psd_dbm_hz: float, bandwidth_hz: float) -> float:
    """Total noise power in linear mW over the given bandwidth."""
    if bandwidth_hz <= 0.0:
        raise ValueError(f"bandwidth must be > 0 Hz, got {bandwidth_hz}")
    return 10.0 ** ((psd_dbm_hz + 10.0 * np.log10(bandwidth_hz)) / 10.0)


@dataclass(frozen=True)
class SystemConfig:
    """All scenario constants for one simulated system.

    activity_prob may be given as a scalar (shared by all devices) or a
    length-N sequence; it is stored as a length-N array either way.
    """

    n_devices: int = 128
    spread_len: int = 64
    n_data_symbols: int = 9
    activity_prob: np.ndarray = 0.1
    cell_radius_km: float = 0.2
    min_distance_km: float = 0.01
    tx_power_dbm: float = 20.0
    noise_psd_dbm_hz: float = -170.0
    bandwidth_hz: float = 1e6
    alphabet: np.ndarray = field(default_factory=lambda: QPSK.copy())
    pilot_symbol: complex = 1.0 + 0.0j
    spreading_ensemble: str = "gaussian"
    ep: EpConfig = field(default_factory=EpConfig)
    seed: int = 0

    def __post_init__(self):
        if self.n_devices < 1:
            raise ValueError(f"n_devices must be >= 1, got {self.n_devices}")
        if self.spread_len < 1:
            raise ValueError(f"spread_len must be >= 1, got {self.spread_len}")
        if self.n_data_symbols < 0:
            raise ValueError(f"n_data_symbols must be >= 0, got {self.n_data_symbols}")
        p = np.atleast_1d(np.asarray(self.activity_prob, dtype=float))
        if p.size == 1 or (p.shape != (self.n_devices,) and np.all(p == p.flat[0])):
            # scalar (or previously broadcast homogeneous vector): share the
            # value across however many devices this config has
            p = np.full(self.n_devices, p.flat[0])
        elif p.shape != (self.n_devices,):
            raise ValueError(f"activity_prob must be scalar or length {self.n_devices}, got shape {p.shape}")
        else:
            p = p.copy()
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise ValueError("activity_prob entries must lie strictly in (0, 1)")
        object.__setattr__(self, "activity_prob", p)
        if not self.cell_radius_km > 0.0:
            raise ValueError(f"cell_radius_km must be > 0, got {self.cell_radius_km}")
        if not 0.0 <= self.min_distance_km < self.cell_radius_km:
            raise ValueError("min_distance_km must satisfy 0 <= min_distance < cell_radius")
        if self.bandwidth_hz <= 0.0:
            raise ValueError(f"bandwidth_hz must be > 0, got {self.bandwidth_hz}")
        alph = np.asarray(self.alphabet, dtype=complex)
        if alph.size == 0:
            raise ValueError("alphabet must be non-empty")
        if not np.isclose(np.sum(np.abs(alph) ** 2), alph.size, rtol=1e-9):
            raise ValueError("alphabet must have unit average power")
        object.__setattr__(self, "alphabet", alph)
        if self.spreading_ensemble not in ("gaussian", "qpsk"):
            raise ValueError(f"spreading_ensemble must be 'gaussian' or 'qpsk', got {self.spreading_ensemble!r}")

    @property
    def tx_power_lin(self) -> float:
        """Transmit power in linear mW."""
        return 10.0 ** (self.tx_power_dbm / 10.0)

    @property
    def noise_var(self) -> float:
        """Receiver noise power in linear mW."""
        return noise_variance(self.noise_psd_dbm_hz, self.bandwidth_hz)


@dataclass(frozen=True)
class Instance:
    """One realized frame.

    phi is the pilot-scaled system matrix (column n = s_n * x_p * sqrt(rho));
    composite = activity * channels is the sparse estimation target of the
    pilot problem y_pilot = phi @ composite + noise.
    """

    phi: np.ndarray           # (M, N) complex
    spreading: np.ndarray     # (M, N) complex, unit-norm columns
    activity: np.ndarray      # (N,) bool
    channels: np.ndarray      # (N,) complex
    composite: np.ndarray     # (N,) complex, = activity * channels
    channel_var: np.ndarray   # (N,) float, linear power
    data_symbols: np.ndarray  # (N, J) complex, zero rows for inactive devices
    y_pilot: np.ndarray       # (M,) complex
    y_data: np.ndarray        # (M, J) complex
    noise_var: float

    def digest(self) -> str:
        """Content hash, used to assert paired-instance properties."""
        h = hashlib.sha256()
        for arr in (self.phi, self.spreading, self.activity, self.channels,
                    self.composite, self.channel_var, self.data_symbols,
                    self.y_pilot, self.y_data):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(np.float64(self.noise_var).tobytes())
        return h.hexdigest()


def _draw_spreading(rng: np.random.Generator, m: int, n: int, ensemble: str) -> np.ndarray:
    if ensemble == "gaussian":
        s = rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n))
        return s / np.linalg.norm(s, axis=0, keepdims=True)
    # qpsk chips all share one modulus, so unit norm is an exact scaling
    chips = QPSK[rng.integers(0, 4, size=(m, n))]
    return chips / np.sqrt(m)


def generate_instance(cfg: SystemConfig, trial_index: int) -> Instance:
    """Realize one frame, fully determined by (cfg.seed, trial_index).

    Devices are placed area-uniformly on the annulus
    [min_distance_km, cell_radius_km]; channel variances follow the pathloss
    law; activity is independent Bernoulli; data symbols are drawn for every
    device and zeroed for inactive ones so the stream consumption does not
    depend on the activity realization.
    """
    n, m, j = cfg.n_devices, cfg.spread_len, cfg.n_data_symbols
    rho = cfg.tx_power_lin
    sigma2 = cfg.noise_var

    u = derive_stream(cfg.seed, trial_index, "placement").random(n)
    d = np.sqrt(cfg.min_distance_km ** 2 + u * (cfg.cell_radius_km ** 2 - cfg.min_distance_km ** 2))
    alpha = pathloss_variance(d)

    activity = derive_stream(cfg.seed, trial_index, "activity").random(n) < cfg.activity_prob
    channels = sample_cn(np.zeros(n), alpha, derive_stream(cfg.seed, trial_index, "channels"))
    composite = np.where(activity, channels, 0.0 + 0.0j)

    spreading = _draw_spreading(derive_stream(cfg.seed, trial_index, "spreading"), m, n, cfg.spreading_ensemble)
    phi = spreading * (cfg.pilot_symbol * np.sqrt(rho))

    idx = derive_stream(cfg.seed, trial_index, "symbols").integers(0, cfg.alphabet.size, size=(n, j))
    data_symbols = cfg.alphabet[idx] * np.sqrt(rho)
    data_symbols[~activity, :] = 0.0

    w_p = sample_cn(np.zeros(m), sigma2, derive_stream(cfg.seed, trial_index, "pilot_noise"))
    y_pilot = phi @ composite + w_p

    w_d = sample_cn(0.0, sigma2, derive_stream(cfg.seed, trial_index, "data_noise"), size=(m, j))
    y_data = spreading @ (channels[:, None] * data_symbols) + w_d

    return Instance(
        phi=phi,
        spreading=spreading,
        activity=activity,
        channels=channels,
        composite=composite,
        channel_var=alpha,
        data_symbols=data_symbols,
        y_pilot=y_pilot,
        y_data=y_data,
        noise_var=sigma2,
    )
