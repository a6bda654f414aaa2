"""Ornstein-Uhlenbeck processes under singular dissipative drift perturbations.

Exact linear-path sampling, resolvent-regularized integration of the
perturbed dynamics, and quantitative verification suites for transient
bounds, weighted moment bounds, change-of-measure densities, and
uniform-integrability certificates.
"""

__version__ = "0.1.0"

from .drifts import (L1SubgradientDrift, Modulation, RadialDrift, RadialGrowth,
                     SaturatingDrift, TimeModulatedDrift, ZeroDrift,
                     check_dissipative, make_drift, resolvent_residual)
from .model import (GalerkinModel, ModelValidationError, semigroup_apply,
                    validate_model, yosida_eigenvalues, yosida_linear)
from .ou import (PathGrid, SamplePath, fernique_probe, largest_stable_gamma,
                 ou_moments, sample_ou_path, sample_ou_paths, zero_noise_path)
from .integrate import (RegularizedSolution, alpha_sweep, assemble_X,
                        check_pathwise_bound, integrate_Z, stopping_time)
from .weights import (WeightFunction, check_moment_bound, estimate_constant,
                      make_weight, noise_functionals)
from .girsanov import (DensityEnsemble, entropy_statistic, martingale_check,
                       rho_tilde, stopped_moment_bound, zeta)
from .pseudoweak import (BallCompression, TestMeasureGrid, cesaro_limit,
                         limsup_check, weak_gap)
from .tails import (BumpSumWeight, ClosedFormWeight, EnvelopeWeight,
                    MollifiedWeight, TabulatedTail, build_bump_weight,
                    check_weight_integral, tail_table, wilson_interval)
from .engine import EnsembleTasks, run_ensemble
