"""Change-of-measure exponents and density statistics along simulated paths.

Stochastic integrals use left-point (non-anticipating) sums, so the discrete
stochastic exponential along the unperturbed path is an exact mean-one
martingale at any step size.  Log-densities are kept in log space and only
exponentiated inside aggregations, behind overflow masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .drifts import Drift
from .integrate import RegularizedSolution
from .model import GalerkinModel
from .ou import SamplePath


def _cutoff(times: np.ndarray, t_end: float | None) -> int:
    if t_end is None:
        return times.size - 1
    k = int(np.searchsorted(times, t_end * (1 + 1e-12), side="right") - 1)
    if not np.isclose(times[k], t_end, rtol=1e-9, atol=1e-12):
        raise ValueError(f"t_end={t_end} is not a grid node")
    return k


def zeta_parts(ou_path: SamplePath, drift: Drift, alpha: float,
               model: GalerkinModel, t_end: float | None = None):
    """Martingale and quadratic parts of the exponent along the source path.

    Left-point sums over steps ending at or before ``t_end``:
    ``mart = sum <s^-1 F_alpha(t_k, w_k), dW_k>`` and
    ``quad = sum |s^-1 F_alpha(t_k, w_k)|^2 dt``.
    """
    times = ou_path.grid.times
    K = _cutoff(times, t_end)
    w = ou_path.w[:K]
    v = drift.yosida(times[:K], alpha, w) / model.sigma_diag
    mart = float(np.sum(v * ou_path.dW[:K]))
    quad = float(np.sum(v * v) * ou_path.grid.dt)
    return mart, quad


def zeta(ou_path: SamplePath, drift: Drift, alpha: float, model: GalerkinModel,
         t_end: float | None = None) -> float:
    """Girsanov exponent: martingale part minus half the quadratic part."""
    mart, quad = zeta_parts(ou_path, drift, alpha, model, t_end)
    return mart - 0.5 * quad


def log_rho_tilde(solution: RegularizedSolution, drift: Drift, alpha: float,
                  model: GalerkinModel) -> float:
    """Log of the transformed density along the perturbed state path.

    Same martingale sum but evaluated on the perturbed states, with the
    quadratic part entering with a *plus* sign.
    """
    path = solution.source
    times = path.grid.times
    x = solution.x_path[:-1]
    u = drift.yosida(times[:-1], alpha, x) / model.sigma_diag
    mart = float(np.sum(u * path.dW))
    quad = float(np.sum(u * u) * path.grid.dt)
    return mart + 0.5 * quad


def rho_tilde(solution: RegularizedSolution, drift: Drift, alpha: float,
              model: GalerkinModel) -> float:
    """Transformed density; may overflow to ``inf`` (reported, not clipped)."""
    with np.errstate(over="ignore"):
        return float(np.exp(log_rho_tilde(solution, drift, alpha, model)))


@dataclass(eq=False)
class DensityEnsemble:
    """Per-path density statistics for one drift at several regularizations."""

    alphas: tuple
    drift_id: dict
    model_id: dict
    n_paths: int
    master_seed: int
    log_rho: np.ndarray            # (A, P) exponent along unperturbed paths
    log_rho_tilde: np.ndarray      # (A, P) exponent along perturbed paths
    tau_levels: tuple = ()
    tau: np.ndarray | None = None       # (L, P) stopping times
    stopped_log_rho: np.ndarray | None = None  # (Ls, A, P) exponent frozen at tau
    stop_levels: tuple = ()
    horizon: float = 0.0

    def exit_counts(self) -> np.ndarray:
        """Per level: number of paths whose threshold hit strictly before T."""
        return np.sum(self.tau < self.horizon - 1e-15, axis=1).astype(int)


def _mean_stderr(vals: np.ndarray):
    m = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
    return m, se


@dataclass
class MartingaleReport:
    alpha: float
    mean: float
    stderr: float
    n_paths: int

    @property
    def passed(self) -> bool:
        return abs(self.mean - 1.0) <= 4.0 * self.stderr + 1e-12


def martingale_check(ens: DensityEnsemble, alpha_index: int = 0) -> MartingaleReport:
    """Sample mean of the density must sit within four standard errors of one."""
    with np.errstate(over="ignore"):
        rho = np.exp(ens.log_rho[alpha_index])
    m, se = _mean_stderr(rho)
    return MartingaleReport(ens.alphas[alpha_index], m, se, ens.n_paths)


@dataclass
class StoppedMomentReport:
    level: float
    alpha: float
    estimate: float
    stderr: float
    bound: float
    n_kept: int
    overflow: int

    @property
    def passed(self) -> bool:
        rel = self.stderr / self.estimate if self.estimate > 0 else 0.0
        return self.estimate <= self.bound * (1.0 + 4.0 * rel) + 1e-12


def stopped_moment_bound(ens: DensityEnsemble, level: float, model: GalerkinModel,
                         drift: Drift, alpha_index: int = 0,
                         t: float | None = None) -> StoppedMomentReport:
    """Second moment of the transformed density on ``{tau_level >= t}``.

    Must stay below ``exp(5 (a(level) |s^-1|)^2 T)`` up to Monte Carlo error.
    The exponential is only evaluated on the indicator set, where the exponent
    is bounded by construction.
    """
    t = ens.horizon if t is None else t
    li = list(ens.tau_levels).index(level)
    keep = ens.tau[li] >= t - 1e-15
    vals = np.zeros(ens.n_paths)
    overflow = 0
    if keep.any():
        with np.errstate(over="ignore"):
            ex = np.exp(2.0 * ens.log_rho_tilde[alpha_index][keep])
        overflow = int(np.sum(~np.isfinite(ex)))
        vals[keep] = ex
    m, se = _mean_stderr(vals)
    a_n = float(np.asarray(drift.bound(np.asarray(float(level)))))
    with np.errstate(over="ignore"):
        bound = float(np.exp(5.0 * (a_n * model.inv_sigma_norm) ** 2
                             * model.horizon))
    return StoppedMomentReport(level, ens.alphas[alpha_index], m, se, bound,
                               int(np.sum(keep)), overflow)


@dataclass
class TwoRouteReport:
    alpha: float
    route_source: float      # mean of rho * Psi(rho) on unperturbed paths
    stderr_source: float
    route_perturbed: float   # mean of Psi(rho_tilde) on perturbed paths
    stderr_perturbed: float
    overflow: int

    @property
    def combined_stderr(self) -> float:
        return float(np.hypot(self.stderr_source, self.stderr_perturbed))

    @property
    def passed(self) -> bool:
        return abs(self.route_source - self.route_perturbed) <= \
            4.0 * self.combined_stderr + 1e-12


def entropy_statistic(ens: DensityEnsemble, weight, alpha_index: int = 0) -> TwoRouteReport:
    """Two independent routes to the same expectation.

    Route one reweights by the density on the unperturbed ensemble; route two
    evaluates the weight of the transformed density on the perturbed
    trajectories of the same seed family.  Agreement within combined Monte
    Carlo error is the change-of-measure identity at work.
    """
    lr = ens.log_rho[alpha_index]
    with np.errstate(over="ignore"):
        r1 = np.exp(lr) * np.asarray(weight.value_from_log(lr))
        r2 = np.asarray(weight.value_from_log(ens.log_rho_tilde[alpha_index]))
    overflow = int(np.sum(~np.isfinite(r1)) + np.sum(~np.isfinite(r2)))
    m1, s1 = _mean_stderr(r1[np.isfinite(r1)]) if np.isfinite(r1).any() else (np.inf, 0)
    m2, s2 = _mean_stderr(r2[np.isfinite(r2)]) if np.isfinite(r2).any() else (np.inf, 0)
    return TwoRouteReport(ens.alphas[alpha_index], m1, s1, m2, s2, overflow)


def entropy_stability(reports) -> float:
    """Max/min ratio of the reweighted statistic across the regularization sweep."""
    vals = [r.route_source for r in reports if np.isfinite(r.route_source)]
    if len(vals) < 2 or min(vals) <= 0:
        return np.inf
    return max(vals) / min(vals)
