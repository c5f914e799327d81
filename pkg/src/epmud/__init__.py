"""EP-based joint activity detection and channel estimation simulator."""

from .baselines import AmpResult, BaselineConfig, amp_estimate, omp_estimate, oracle_mmse, soft_threshold
from .detection import EstimationResult, aud_threshold, detect_active, mmse_data_detect, quantize
from .ep_core import (EpConfig, EpState, EpTrace, LikelihoodFactor, cavity, damp, global_update,
                      init_state, moment_match, run_ep, site_moments)
from .gaussian import ScalarGaussian, cn_pdf, gaussian_product, log_cn_pdf, sample_cn
from .harness import (ConfigError, SweepRow, SweepSpec, apply_overrides, load_config, run_algorithm,
                      run_sweep, trial_metrics_for, write_csv)
from .metrics import MetricAccumulator, TrialMetrics, aer, nmse_g, nnmse, nser
from .scenario import (BPSK, QPSK, Instance, SystemConfig, derive_stream, generate_instance,
                       noise_variance, pathloss_variance)

__version__ = "0.1.0"
