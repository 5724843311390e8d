"""Desk-scale DP-FedAvg with canary memorization audits and RDP accounting.

Modules:
  lm             CIFG-LSTM language model, exact gradients, beam search
  fedavg         DP-FedAvg rounds: sampling, clipping, noise, server optimizers
  population     ordinary and canary-carrying devices, pace steering
  secret_sharer  random-sampling rank, exposure, beam extraction
  accountant     RDP of the subsampled Gaussian, (epsilon, delta) conversion
  experiment     specs, file-backed pipeline stages, bundles
  sweep, report, cli
"""

from fedmem.accountant import DpGuarantee, dp_fedavg_guarantee, group_privacy, table4
from fedmem.errors import ConfigError, FedmemError, InputError
from fedmem.experiment import ExperimentSpec, load_bundle, run_experiment
from fedmem.fedavg import ClientConfig, DpConfig, ServerOptConfig, train
from fedmem.kernels import BACKEND as KERNEL_BACKEND
from fedmem.lm import ModelParams, beam_search, log_perplexity, loss_and_gradient
from fedmem.population import DEFAULT_GRID, CanaryConfig, PopulationSpec, build_population
from fedmem.report import emit_report
from fedmem.secret_sharer import audit_report, beam_extraction, random_sampling_rank
from fedmem.sweep import SweepSpec, run_sweep

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND", "DEFAULT_GRID", "CanaryConfig", "ClientConfig", "ConfigError",
    "DpConfig", "DpGuarantee", "ExperimentSpec", "FedmemError", "InputError",
    "ModelParams", "PopulationSpec", "ServerOptConfig", "SweepSpec", "audit_report",
    "beam_extraction", "beam_search", "build_population", "dp_fedavg_guarantee",
    "emit_report", "group_privacy", "load_bundle", "log_perplexity", "loss_and_gradient",
    "random_sampling_rank", "run_experiment", "run_sweep", "table4", "train",
]
