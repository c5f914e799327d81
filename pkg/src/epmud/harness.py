"""Monte Carlo sweep driver: config parsing, paired trials, CSV emission.

Config files are flat UTF-8 ``key = value`` text with ``#`` comments and
comma-separated list values.  Every key has a default mirroring the
reference scenario (128 devices, spreading length 64, activity 0.1, 9 QPSK
data symbols, 200 m cell, -170 dBm/Hz noise over 1 MHz), so an empty file
is a valid configuration.

Recognized keys::

    n_devices spread_len n_data_symbols activity_prob cell_radius_km
    min_distance_km tx_power_dbm noise_psd_dbm_hz bandwidth_hz alphabet
    pilot_symbol spreading_ensemble seed
    ep.max_iters ep.tol ep.damping ep.min_site_variance ep.schedule
    baseline.omp_max_atoms baseline.omp_residual_factor
    baseline.amp_max_iters baseline.amp_threshold_mult baseline.amp_damping
    detection.paper_literal_mmse_reg
    sweep.variable sweep.values sweep.trials_per_point sweep.algorithms
    sweep.output_path

Reproducibility contract: the emitted CSV bytes are a pure function of the
configuration and seed, independent of the worker count.  Per-point wall
times are measured and kept on the rows, but written to the CSV only when
timing output is explicitly requested, because real timings would break
byte-reproducibility.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import numpy as np

from .baselines import BaselineConfig, amp_estimate, omp_estimate, oracle_mmse
from .detection import EstimationResult, detect_active, mmse_data_detect
from .ep_core import EpConfig, LikelihoodFactor, run_ep
from .metrics import MetricAccumulator, TrialMetrics, aer, nmse_g, nnmse, nser
from .scenario import BPSK, QPSK, Instance, SystemConfig, generate_instance

__all__ = [
    "ConfigError",
    "SweepSpec",
    "SweepRow",
    "ALGORITHMS",
    "SWEEP_VARIABLES",
    "CSV_HEADER",
    "load_config",
    "parse_config_text",
    "apply_overrides",
    "run_sweep",
    "run_algorithm",
    "trial_metrics_for",
    "write_csv",
]

log = logging.getLogger("epmud")

ALGORITHMS = ("amp", "ep", "omp", "oracle")
SWEEP_VARIABLES = ("tx_power_dbm", "spread_len", "activity_prob", "ep_iters")
_INT_SWEEP_VARS = ("spread_len", "ep_iters")

CSV_HEADER = ("sweep_var,sweep_value,algorithm,trials,aer_mean,aer_se,"
              "nnmse_mean,nnmse_se,nser_mean,nser_se,nmse_g_mean,nmse_g_se,"
              "undefined_trials,wall_s")


class ConfigError(ValueError):
    """A config file could not be parsed or violates a constraint."""


@dataclass(frozen=True)
class SweepSpec:
    """One sweep: which variable, which values, which algorithms, how many trials."""

    variable: str = "tx_power_dbm"
    values: tuple = (0.0, 4.0, 8.0, 12.0, 16.0, 20.0)
    trials_per_point: int = 1000
    algorithms: tuple = ALGORITHMS
    base: SystemConfig = field(default_factory=SystemConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    paper_literal_mmse_reg: bool = False
    output_path: str = "sweep.csv"

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ConfigError(f"sweep.variable must be one of {SWEEP_VARIABLES}, got {self.variable!r}")
        vals = tuple(self.values)
        if not vals:
            raise ConfigError("sweep.values must be non-empty")
        diffs = np.diff(np.asarray(vals, dtype=float))
        if len(vals) > 1 and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ConfigError("sweep.values must be strictly monotone")
        if self.variable in _INT_SWEEP_VARS:
            if any(float(v) != int(v) for v in vals):
                raise ConfigError(f"sweep.values for {self.variable} must be integers")
            vals = tuple(int(v) for v in vals)
        else:
            vals = tuple(float(v) for v in vals)
        object.__setattr__(self, "values", vals)
        if self.trials_per_point < 1:
            raise ConfigError(f"sweep.trials_per_point must be >= 1, got {self.trials_per_point}")
        algs = tuple(self.algorithms)
        unknown = [a for a in algs if a not in ALGORITHMS]
        if unknown or not algs:
            raise ConfigError(f"sweep.algorithms must be a non-empty subset of {ALGORITHMS}, got {algs}")
        if len(set(algs)) != len(algs):
            raise ConfigError("sweep.algorithms must not repeat")
        object.__setattr__(self, "algorithms", algs)

    def point_config(self, value_index: int) -> SystemConfig:
        """System config at one sweep point, with a seed derived from
        (base seed, value index) so trials are paired across algorithms but
        independent across points."""
        value = self.values[value_index]
        seed = int(np.random.SeedSequence(
            [int(self.base.seed) & 0xFFFFFFFFFFFFFFFF, int(value_index)]
        ).generate_state(1, dtype=np.uint64)[0])
        cfg = self.base
        if self.variable == "tx_power_dbm":
            cfg = replace(cfg, tx_power_dbm=float(value), seed=seed)
        elif self.variable == "spread_len":
            cfg = replace(cfg, spread_len=int(value), seed=seed)
        elif self.variable == "activity_prob":
            cfg = replace(cfg, activity_prob=float(value), seed=seed)
        else:  # ep_iters
            cfg = replace(cfg, ep=replace(cfg.ep, max_iters=int(value)), seed=seed)
        return cfg


@dataclass(frozen=True)
class SweepRow:
    """Aggregated results for one (sweep value, algorithm) cell."""

    sweep_var: str
    sweep_value: float
    algorithm: str
    trials: int
    aer_mean: float
    aer_se: float
    nnmse_mean: float
    nnmse_se: float
    nser_mean: float
    nser_se: float
    nmse_g_mean: float
    nmse_g_se: float
    undefined_trials: int
    wall_s: float


# ---------------------------------------------------------------------------
# config parsing

_ALPHABETS = {"qpsk": QPSK, "bpsk": BPSK}


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int(s: str) -> int:
    return int(s.strip(), 0)


def _parse_float(s: str) -> float:
    return float(s.strip())


def _parse_complex(s: str) -> complex:
    return complex(s.strip().replace(" ", ""))


def _parse_float_list(s: str) -> tuple:
    items = [item.strip() for item in s.split(",") if item.strip()]
    if not items:
        raise ValueError("empty list")
    return tuple(float(item) for item in items)


def _parse_str_list(s: str) -> tuple:
    return tuple(item.strip() for item in s.split(",") if item.strip())


def _parse_alphabet(s: str) -> np.ndarray:
    name = s.strip().lower()
    if name not in _ALPHABETS:
        raise ValueError(f"unknown alphabet {s!r}; choose from {sorted(_ALPHABETS)}")
    return _ALPHABETS[name].copy()


# key -> (group, field name, converter); groups map onto the config dataclasses
_KEYS = {
    "n_devices": ("system", "n_devices", _parse_int),
    "spread_len": ("system", "spread_len", _parse_int),
    "n_data_symbols": ("system", "n_data_symbols", _parse_int),
    "activity_prob": ("system", "activity_prob", _parse_float),
    "cell_radius_km": ("system", "cell_radius_km", _parse_float),
    "min_distance_km": ("system", "min_distance_km", _parse_float),
    "tx_power_dbm": ("system", "tx_power_dbm", _parse_float),
    "noise_psd_dbm_hz": ("system", "noise_psd_dbm_hz", _parse_float),
    "bandwidth_hz": ("system", "bandwidth_hz", _parse_float),
    "alphabet": ("system", "alphabet", _parse_alphabet),
    "pilot_symbol": ("system", "pilot_symbol", _parse_complex),
    "spreading_ensemble": ("system", "spreading_ensemble", str.strip),
    "seed": ("system", "seed", _parse_int),
    "ep.max_iters": ("ep", "max_iters", _parse_int),
    "ep.tol": ("ep", "tol", _parse_float),
    "ep.damping": ("ep", "damping", _parse_float),
    "ep.min_site_variance": ("ep", "min_site_variance", _parse_float),
    "ep.schedule": ("ep", "schedule", str.strip),
    "baseline.omp_max_atoms": ("baseline", "omp_max_atoms", _parse_int),
    "baseline.omp_residual_factor": ("baseline", "omp_residual_factor", _parse_float),
    "baseline.amp_max_iters": ("baseline", "amp_max_iters", _parse_int),
    "baseline.amp_threshold_mult": ("baseline", "amp_threshold_mult", _parse_float),
    "baseline.amp_damping": ("baseline", "amp_damping", _parse_float),
    "detection.paper_literal_mmse_reg": ("sweep", "paper_literal_mmse_reg", _parse_bool),
    "sweep.variable": ("sweep", "variable", str.strip),
    "sweep.values": ("sweep", "values", _parse_float_list),
    "sweep.trials_per_point": ("sweep", "trials_per_point", _parse_int),
    "sweep.algorithms": ("sweep", "algorithms", _parse_str_list),
    "sweep.output_path": ("sweep", "output_path", str.strip),
}


def parse_config_text(text: str, source: str = "<config>") -> SweepSpec:
    """Build a SweepSpec from flat key = value text.

    Unknown keys are rejected with all of them listed; parse failures carry
    the line number; constraint violations carry the offending key name.
    """
    groups: dict[str, dict] = {"system": {}, "ep": {}, "baseline": {}, "sweep": {}}
    unknown = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _KEYS:
            unknown.append((lineno, key))
            continue
        group, fname, conv = _KEYS[key]
        try:
            groups[group][fname] = conv(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    if unknown:
        listing = ", ".join(f"{k} (line {ln})" for ln, k in unknown)
        raise ConfigError(f"{source}: unknown keys: {listing}")
    try:
        ep = EpConfig(**groups["ep"])
        system = SystemConfig(ep=ep, **groups["system"])
        baseline = BaselineConfig(**groups["baseline"])
        return SweepSpec(base=system, baseline=baseline, **groups["sweep"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> SweepSpec:
    """Parse a config file; an empty file yields the all-defaults spec."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def apply_overrides(spec: SweepSpec, overrides) -> SweepSpec:
    """Apply CLI ``key=value`` strings on top of a parsed spec, one for one."""
    if not overrides:
        return spec
    groups: dict[str, dict] = {"system": {}, "ep": {}, "baseline": {}, "sweep": {}}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in _KEYS:
            raise ConfigError(f"--set: unknown key {key!r}")
        group, fname, conv = _KEYS[key]
        try:
            groups[group][fname] = conv(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"--set: bad value for {key!r}: {exc}") from exc
    try:
        ep = replace(spec.base.ep, **groups["ep"]) if groups["ep"] else spec.base.ep
        system_updates = dict(groups["system"])
        if groups["ep"] or system_updates:
            system = replace(spec.base, ep=ep, **system_updates)
        else:
            system = spec.base
        baseline = replace(spec.baseline, **groups["baseline"]) if groups["baseline"] else spec.baseline
        return replace(spec, base=system, baseline=baseline, **groups["sweep"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"--set: {exc}") from exc


# ---------------------------------------------------------------------------
# per-trial pipeline

def run_algorithm(name: str, inst: Instance, cfg: SystemConfig,
                  baseline: BaselineConfig = BaselineConfig(),
                  paper_literal_mmse_reg: bool = False) -> EstimationResult:
    """Run one estimator on one frame through detection and data recovery."""
    trace = None
    if name == "ep":
        lf = LikelihoodFactor(inst.phi, inst.y_pilot, inst.noise_var)
        g_hat, var_diag, trace = run_ep(lf, cfg.activity_prob, inst.channel_var, cfg.ep)
        support, h_hat = detect_active(g_hat, var_diag, inst.channel_var)
    elif name == "oracle":
        support = np.flatnonzero(inst.activity)
        g_hat = oracle_mmse(inst.phi, inst.y_pilot, support, inst.channel_var, inst.noise_var)
        var_diag = None
        h_hat = g_hat[support]
    elif name == "omp":
        resolved = baseline.omp_max_atoms
        if resolved is None:
            resolved = int(math.ceil(3.0 * float(np.sum(cfg.activity_prob))))
        g_hat, support = omp_estimate(inst.phi, inst.y_pilot, inst.noise_var,
                                      replace(baseline, omp_max_atoms=max(resolved, 1)))
        var_diag = None
        h_hat = g_hat[support]
    elif name == "amp":
        res = amp_estimate(inst.phi, inst.y_pilot, inst.noise_var, baseline)
        g_hat, support = res.g_hat, res.support
        var_diag = None
        h_hat = g_hat[support]
    else:
        raise ValueError(f"unknown algorithm {name!r}")
    x_hat = mmse_data_detect(inst.spreading, support, h_hat, inst.y_data,
                             inst.noise_var, cfg.tx_power_lin, cfg.alphabet,
                             paper_literal_reg=paper_literal_mmse_reg)
    return EstimationResult(g_hat=g_hat, var_diag=var_diag, support_hat=support,
                            h_hat=h_hat, x_hat=x_hat, trace=trace)


def trial_metrics_for(inst: Instance, result: EstimationResult) -> TrialMetrics:
    """Score one estimator output against the frame's ground truth."""
    n = inst.activity.size
    a_hat = np.zeros(n, dtype=bool)
    a_hat[result.support_hat] = True
    true_support = np.flatnonzero(inst.activity)
    return TrialMetrics(
        aer=aer(inst.activity, a_hat),
        nnmse=nnmse(inst.channels, result.net_channel_estimate(), true_support),
        nser=nser(inst.data_symbols[true_support], result.x_hat, true_support, result.support_hat),
        nmse_g=nmse_g(inst.composite, result.g_hat),
        n_active=int(true_support.size),
    )


def _run_trial(spec: SweepSpec, point_cfg: SystemConfig, trial_index: int):
    """All selected algorithms on one shared (paired) instance."""
    inst = generate_instance(point_cfg, trial_index)
    out = {}
    for name in spec.algorithms:
        t0 = time.perf_counter()
        result = run_algorithm(name, inst, point_cfg, spec.baseline, spec.paper_literal_mmse_reg)
        elapsed = time.perf_counter() - t0
        out[name] = (trial_metrics_for(inst, result), elapsed)
    return out


def _trial_chunk(args):
    spec, value_index, start, stop = args
    point_cfg = spec.point_config(value_index)
    return [_run_trial(spec, point_cfg, t) for t in range(start, stop)]


def run_sweep(spec: SweepSpec, n_workers: int = 1) -> list:
    """Execute the sweep and aggregate per (value, algorithm).

    Trials are the unit of parallelism; each is pure given its derived seed,
    and per-trial results are folded in trial order, so the output is
    independent of n_workers.  A fatal numeric error aborts the affected
    sweep point (logged), and the remaining points continue.
    """
    n_workers = max(1, int(n_workers))
    rows: list[SweepRow] = []
    for vi, value in enumerate(spec.values):
        try:
            trial_results = _collect_point(spec, vi, n_workers)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            log.error("sweep point %s=%s aborted: %s", spec.variable, value, exc)
            continue
        accs = {name: MetricAccumulator() for name in spec.algorithms}
        walls = {name: 0.0 for name in spec.algorithms}
        for per_trial in trial_results:  # already in trial order
            for name, (tm, elapsed) in per_trial.items():
                accs[name].add(tm)
                walls[name] += elapsed
        for name in spec.algorithms:
            s = accs[name].summary()
            rows.append(SweepRow(
                sweep_var=spec.variable,
                sweep_value=value,
                algorithm=name,
                trials=accs[name].trials,
                undefined_trials=accs[name].undefined_trials,
                wall_s=walls[name],
                **s,
            ))
    rows.sort(key=lambda r: (r.sweep_value, r.algorithm))
    return rows


def _collect_point(spec: SweepSpec, value_index: int, n_workers: int):
    trials = spec.trials_per_point
    if n_workers == 1:
        point_cfg = spec.point_config(value_index)
        return [_run_trial(spec, point_cfg, t) for t in range(trials)]
    chunk = max(1, math.ceil(trials / (4 * n_workers)))
    tasks = [(spec, value_index, start, min(start + chunk, trials))
             for start in range(0, trials, chunk)]
    results: list = []
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        for part in pool.map(_trial_chunk, tasks):  # map preserves task order
            results.extend(part)
    return results


# ---------------------------------------------------------------------------
# CSV emission

def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(rows, path, include_timing: bool = False) -> None:
    """Write sweep rows with the fixed header, '\\n' newlines, shortest
    round-trip float formatting.

    wall_s is zeroed unless include_timing is set: measured times are not a
    function of (config, seed) and would break byte-reproducibility.
    """
    lines = [CSV_HEADER]
    for r in rows:
        wall = r.wall_s if include_timing else 0.0
        lines.append(",".join([
            r.sweep_var,
            _fmt(r.sweep_value),
            r.algorithm,
            str(r.trials),
            _fmt(r.aer_mean), _fmt(r.aer_se),
            _fmt(r.nnmse_mean), _fmt(r.nnmse_se),
            _fmt(r.nser_mean), _fmt(r.nser_se),
            _fmt(r.nmse_g_mean), _fmt(r.nmse_g_se),
            str(r.undefined_trials),
            _fmt(float(wall)),
        ]))
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write CSV to {path}: {exc}") from exc


def read_csv_rows(path) -> list:
    """Parse a CSV written by write_csv back into SweepRow objects."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: missing or wrong header")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        try:
            value = int(parts[1])
        except ValueError:
            value = float(parts[1])
        out.append(SweepRow(
            sweep_var=parts[0],
            sweep_value=value,
            algorithm=parts[2],
            trials=int(parts[3]),
            aer_mean=float(parts[4]), aer_se=float(parts[5]),
            nnmse_mean=float(parts[6]), nnmse_se=float(parts[7]),
            nser_mean=float(parts[8]), nser_se=float(parts[9]),
            nmse_g_mean=float(parts[10]), nmse_g_se=float(parts[11]),
            undefined_trials=int(parts[12]),
            wall_s=float(parts[13]),
        ))
    return out
