"""Catalog of maximal dissipative drifts.

Each drift exposes four maps, all vectorized over states of shape
``(..., dim)`` with a time argument broadcastable to the leading axes:

* ``minimal_section(t, x)`` -- the least-norm element of the drift set;
* ``resolvent(t, alpha, x)`` -- the single-valued inverse of ``I - alpha*F``;
* ``yosida(t, alpha, x)``   -- ``(resolvent - identity) / alpha``, the
  globally Lipschitz regularization (constant at most ``2/alpha``);
* ``bound(r)``              -- the increasing radial envelope ``a`` with
  ``|minimal_section(t, x)| <= a(|x|)``.

The catalog is closed under multiplication by a measurable time modulation
with values in ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DriftSolverError(RuntimeError):
    """Scalar resolvent solve failed to converge (should never happen)."""


def _norm(x):
    return np.linalg.norm(x, axis=-1)


# ---------------------------------------------------------------------------
# scalar helpers


@dataclass(frozen=True)
class RadialGrowth:
    """Power-law radial coefficient ``g(r) = coef * r**power``.

    ``power`` must be zero (constant coefficient) or at least one so that the
    derivative stays bounded near the origin; ``coef`` must be nonnegative so
    the induced drift is dissipative.
    """

    coef: float = 1.0
    power: float = 2.0

    def __post_init__(self):
        if self.coef < 0:
            raise ValueError("growth coefficient must be nonnegative")
        if self.power != 0 and self.power < 1:
            raise ValueError("growth power must be 0 or >= 1")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.power == 0:
            return np.full_like(r, self.coef)
        return self.coef * np.power(r, self.power)

    def deriv(self, r):
        r = np.asarray(r, dtype=float)
        if self.power == 0:
            return np.zeros_like(r)
        return self.coef * self.power * np.power(r, self.power - 1.0)

    def describe(self):
        return {"coef": self.coef, "power": self.power}


def solve_radial_scale(growth: RadialGrowth, alpha_eff, r, s0=None, tol=1e-13,
                       max_iter=80):
    """Solve ``s + alpha_eff * g(s) * s = r`` for ``s >= 0``, vectorized.

    The left side is increasing and convex in ``s``, so a Newton step from any
    point below the root lands above it and the iteration then decreases
    monotonically: convergence is guaranteed.  ``s0`` supplies a warm start.
    """
    r = np.asarray(r, dtype=float)
    shape = r.shape
    r = np.atleast_1d(r)
    alpha_eff = np.broadcast_to(np.asarray(alpha_eff, dtype=float), r.shape)
    s = np.array(np.broadcast_to(r if s0 is None else s0, r.shape), dtype=float)
    np.clip(s, 0.0, None, out=s)
    scale = 1.0 + r
    for _ in range(max_iter):
        h = s + alpha_eff * growth(s) * s - r
        if np.all(np.abs(h) <= tol * scale):
            break
        hp = 1.0 + alpha_eff * (growth(s) + growth.deriv(s) * s)
        s = s - h / hp
        np.clip(s, 0.0, None, out=s)
    else:
        raise DriftSolverError("radial resolvent Newton iteration did not converge")
    return s.reshape(shape)


@dataclass(frozen=True)
class Modulation:
    """Time factor with values in ``[0, 1]``.

    ``kind`` is ``"abs_sin"`` (``|sin t|``) or ``"piecewise"`` with knots
    ``times`` and ``values`` (right-open intervals, last value extends).
    """

    kind: str = "abs_sin"
    times: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("abs_sin", "piecewise"):
            raise ValueError(f"unknown modulation kind {self.kind!r}")
        if self.kind == "piecewise":
            if len(self.times) != len(self.values) or not self.times:
                raise ValueError("piecewise modulation needs matching knots and values")
            if any(not 0.0 <= v <= 1.0 for v in self.values):
                raise ValueError("modulation values must lie in [0, 1]")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "abs_sin":
            return np.abs(np.sin(t))
        idx = np.clip(np.searchsorted(np.asarray(self.times), t, side="right") - 1, 0, None)
        return np.asarray(self.values, dtype=float)[idx]

    def describe(self):
        d = {"kind": self.kind}
        if self.kind == "piecewise":
            d["times"] = list(self.times)
            d["values"] = list(self.values)
        return d


# ---------------------------------------------------------------------------
# drift catalog


class Drift:
    """Common surface of the drift catalog."""

    kind = "abstract"
    time_dependent = False

    def minimal_section(self, t, x):
        raise NotImplementedError

    def resolvent(self, t, alpha, x):
        raise NotImplementedError

    def resolvent_warm(self, t, alpha, x, state=None):
        """Resolvent with an opaque warm-start state for tight step loops.

        The default ignores the state; iterative kinds reuse it to seed the
        scalar solve.  The returned value always satisfies the same residual
        contract as :meth:`resolvent`.
        """
        return self.resolvent(t, alpha, x), None

    def yosida(self, t, alpha, x):
        return (self.resolvent(t, alpha, x) - x) / alpha

    def bound(self, r):
        raise NotImplementedError

    def bound_name(self) -> str:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "bound": self.bound_name()}


@dataclass(frozen=True)
class ZeroDrift(Drift):
    kind = "zero"

    def minimal_section(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def resolvent(self, t, alpha, x):
        return np.asarray(x, dtype=float).copy()

    def yosida(self, t, alpha, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def bound(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))

    def bound_name(self):
        return "zero"


@dataclass(frozen=True)
class RadialDrift(Drift):
    """``F(x) = -g(|x|) x`` for a nondecreasing radial coefficient ``g``.

    The gradient of a convex radial potential, hence single-valued and
    dissipative on the whole space.  Resolvent reduces to one scalar monotone
    equation on the norm.
    """

    growth: RadialGrowth = field(default_factory=RadialGrowth)
    kind = "radial"

    def minimal_section(self, t, x):
        x = np.asarray(x, dtype=float)
        return -self.growth(_norm(x))[..., None] * x

    def resolvent(self, t, alpha, x):
        return self.resolvent_warm(t, alpha, x)[0]

    def resolvent_warm(self, t, alpha, x, state=None):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        s = solve_radial_scale(self.growth, alpha, r, s0=state)
        factor = np.divide(s, r, out=np.zeros_like(r), where=r > 0)
        return factor[..., None] * x, s

    def bound(self, r):
        r = np.asarray(r, dtype=float)
        return self.growth(r) * r

    def bound_name(self):
        return f"g(r)*r with g(r)={self.growth.coef}*r^{self.growth.power}"

    def describe(self):
        return {"kind": self.kind, "growth": self.growth.describe(),
                "bound": self.bound_name()}


@dataclass(frozen=True)
class L1SubgradientDrift(Drift):
    """Negative subgradient of the l1 norm, componentwise and multivalued at zeros.

    The least-norm selection is ``-sign`` with value 0 at 0; the resolvent is
    componentwise soft-thresholding at level ``alpha``.
    """

    dim: int = 1
    kind = "l1_subgradient"

    def minimal_section(self, t, x):
        return -np.sign(np.asarray(x, dtype=float))

    def resolvent(self, t, alpha, x):
        x = np.asarray(x, dtype=float)
        alpha = np.asarray(alpha, dtype=float)[..., None] if np.ndim(alpha) else alpha
        return np.sign(x) * np.maximum(np.abs(x) - alpha, 0.0)

    def bound(self, r):
        r = np.asarray(r, dtype=float)
        return np.full_like(r, np.sqrt(float(self.dim)))

    def bound_name(self):
        return f"sqrt(dim)={np.sqrt(float(self.dim)):.6g}"


@dataclass(frozen=True)
class SaturatingDrift(Drift):
    """Bounded drift ``F(x) = -x / (eps + |x|)`` with unit radial envelope.

    The resolvent norm solves a quadratic, so no iteration is needed.
    """

    eps: float = 1.0
    kind = "saturating"

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("saturating drift needs eps > 0")

    def minimal_section(self, t, x):
        x = np.asarray(x, dtype=float)
        return -x / (self.eps + _norm(x))[..., None]

    def resolvent(self, t, alpha, x):
        x = np.asarray(x, dtype=float)
        r = _norm(x)
        alpha = np.broadcast_to(np.asarray(alpha, dtype=float), r.shape)
        # positive root of s^2 + s (eps + alpha - r) - r eps = 0
        b = r - self.eps - alpha
        s = 0.5 * (b + np.sqrt(b * b + 4.0 * self.eps * r))
        factor = np.divide(s, r, out=np.zeros_like(r), where=r > 0)
        return factor[..., None] * x

    def bound(self, r):
        return np.ones_like(np.asarray(r, dtype=float))

    def bound_name(self):
        return "1"

    def describe(self):
        return {"kind": self.kind, "eps": self.eps, "bound": self.bound_name()}


@dataclass(frozen=True)
class TimeModulatedDrift(Drift):
    """``F(t, x) = m(t) * base(x)`` for a modulation ``m`` with values in [0, 1].

    The resolvent at time ``t`` is the base resolvent at the effective
    parameter ``alpha * m(t)``; at ``m(t) = 0`` it is the identity.
    """

    base: Drift = field(default_factory=lambda: RadialDrift())
    modulation: Modulation = field(default_factory=Modulation)
    kind = "time_modulated"
    time_dependent = True

    def _m(self, t, like):
        m = np.asarray(self.modulation(t), dtype=float)
        return np.broadcast_to(m, np.asarray(like).shape[:-1])

    def minimal_section(self, t, x):
        x = np.asarray(x, dtype=float)
        return self._m(t, x)[..., None] * self.base.minimal_section(t, x)

    def resolvent(self, t, alpha, x):
        x = np.asarray(x, dtype=float)
        return self.base.resolvent(t, alpha * self._m(t, x), x)

    def resolvent_warm(self, t, alpha, x, state=None):
        x = np.asarray(x, dtype=float)
        return self.base.resolvent_warm(t, alpha * self._m(t, x), x, state)

    def yosida(self, t, alpha, x):
        x = np.asarray(x, dtype=float)
        return (self.resolvent(t, alpha, x) - x) / alpha

    def bound(self, r):
        return self.base.bound(r)

    def bound_name(self):
        return self.base.bound_name()

    def describe(self):
        return {"kind": self.kind, "base": self.base.describe(),
                "modulation": self.modulation.describe(),
                "bound": self.bound_name()}


def make_drift(kind: str, *, dim: int | None = None, **params) -> Drift:
    """Build a catalog drift from its config key and parameters."""
    if kind == "zero":
        return ZeroDrift()
    if kind == "radial":
        return RadialDrift(RadialGrowth(coef=params.get("coef", 1.0),
                                        power=params.get("power", 2.0)))
    if kind == "l1_subgradient":
        if dim is None:
            raise ValueError("l1_subgradient drift needs the state dimension")
        return L1SubgradientDrift(dim=dim)
    if kind == "saturating":
        return SaturatingDrift(eps=params.get("eps", 1.0))
    if kind == "time_modulated":
        base = make_drift(params["base_kind"], dim=dim,
                          **params.get("base_params", {}))
        mod = params.get("modulation", {"kind": "abs_sin"})
        modulation = Modulation(kind=mod.get("kind", "abs_sin"),
                                times=tuple(mod.get("times", ())),
                                values=tuple(mod.get("values", ())))
        return TimeModulatedDrift(base=base, modulation=modulation)
    raise ValueError(f"unknown drift kind {kind!r}")


def resolvent_residual(drift: Drift, t, alpha, x) -> np.ndarray:
    """A-posteriori resolvent residual ``|J - alpha*F0(J) - x|`` (per sample).

    For time-modulated drifts the minimal section already carries the time
    factor, so the same identity applies verbatim.
    """
    x = np.asarray(x, dtype=float)
    j = drift.resolvent(t, alpha, x)
    alpha_col = np.asarray(alpha, dtype=float)
    if alpha_col.ndim:
        alpha_col = alpha_col[..., None]
    return _norm(j - alpha_col * drift.minimal_section(t, j) - x)


@dataclass
class DissipativityReport:
    max_monotone_gap: float
    lipschitz_ratio: dict
    n_pairs: int
    passed: bool


def check_dissipative(drift: Drift, seed: int, n_pairs: int, *, dim: int,
                      t_max: float = 1.0, scale: float = 3.0,
                      alphas=(1e-1, 1e-2, 1e-3)) -> DissipativityReport:
    """Sample pairs and report the worst monotonicity gap and Lipschitz ratios.

    The monotone gap ``<F0(t,x1)-F0(t,x2), x1-x2>`` must stay nonpositive and
    the regularized map must have difference quotients at most ``2/alpha``.
    A positive gap is reported in the result, not raised.
    """
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, t_max, size=n_pairs)
    x1 = scale * rng.standard_normal((n_pairs, dim))
    x2 = scale * rng.standard_normal((n_pairs, dim))
    gap = np.sum((drift.minimal_section(t, x1) - drift.minimal_section(t, x2))
                 * (x1 - x2), axis=-1)
    max_gap = float(np.max(gap)) if n_pairs else 0.0
    ratios = {}
    denom = _norm(x1 - x2)
    ok = denom > 1e-12
    for alpha in alphas:
        diff = _norm(drift.yosida(t, alpha, x1) - drift.yosida(t, alpha, x2))
        ratio = np.divide(diff, denom, out=np.zeros_like(diff), where=ok)
        ratios[alpha] = float(np.max(ratio)) if n_pairs else 0.0
    tol = 1e-9
    passed = max_gap <= tol and all(v <= 2.0 / a * (1 + 1e-9) for a, v in ratios.items())
    return DissipativityReport(max_gap, ratios, n_pairs, passed)
