"""Intermediate-generator training and downstream tasks for score-based models."""
from .sde import (EmConfig, SdeSpec, Trajectory, cat_map_drift, em_step, lotka_volterra_drift,
                  make_process, ou_process, simulate, simulate_ensemble, vp_kernel, vp_process)
from .nn import Adam, MlpSpec, Param, backward, forward, sinusoidal_embed
from .score import (IgoConfig, ScoreNet, TrainBatch, dsm_target_em, dsm_target_gaussian,
                    loss_igo, loss_multi, loss_standard, train)
from .sampling import SamplerConfig, probability_flow_sample, reverse_em, rk45_integrate
from .downstream import (Generator, MeasurementModel, csgm_recover, lipschitz_estimate, ppower,
                         project_to_range, range_expansion_probe, sample_complexity_sweep,
                         weight_divergence)

__version__ = "0.1.0"
