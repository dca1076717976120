"""Short-time percentiles of one-dimensional SDEs.

For dX = a dt + b dW the alpha-percentile at small t is

    x0 + b0 sqrt(t) z + (a0 - 1/2 b0 b0' (1 - z^2)) t + O(t^{3/2}),  z = Phi^-1(alpha),

so the median moves with the Stratonovich drift a - b b'/2, and a mode sits
near x0 + (a - 3/2 b b') t.  This module evaluates those formulas, measures
the same quantities by Monte Carlo, and tabulates fan curves
t -> gamma_{x0}(Phi^-1(alpha) sqrt(t)).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erfc
from scipy.stats import gaussian_kde

from ._domain import require
from .errors import ConfigError, ModelError
from .jetcore import Jet2, JetPoint, extract_ab, pushforward
from .models import JetField, SdeModel, to_ito, to_jet_field
from .schemes import FORMAT_VERSION, sample_grid, simulate_2jet

# Rational approximation of the normal quantile (Acklam), refined by one
# Halley step on the exact CDF.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _poly(coefs, x):
    out = np.zeros_like(x)
    for c in coefs:
        out = out * x + c
    return out


def norm_ppf(p):
    """Phi^-1(p) for p in (0, 1); exactly 0 at p = 0.5."""
    p = np.asarray(p, dtype=float)
    require((p > 0) & (p < 1), "probability must lie strictly between 0 and 1", p)
    # work in the lower half (1 - p is exact for p >= 1/2) and flip the sign
    upper = p > 0.5
    q = np.where(upper, 1.0 - p, p)
    x = np.empty_like(q)
    lo = q < _P_LOW
    mid = ~lo
    c = q[mid] - 0.5
    r = c * c
    x[mid] = _poly(_A, r) * c / (_poly(_B, r) * r + 1.0)
    ql = np.sqrt(-2.0 * np.log(q[lo]))
    x[lo] = _poly(_C, ql) / (_poly(_D, ql) * ql + 1.0)
    # Halley refinement against the CDF
    e = 0.5 * erfc(-x / math.sqrt(2.0)) - q
    u = e * math.sqrt(2.0 * math.pi) * np.exp(0.5 * x * x)
    x = x - u / (1.0 + 0.5 * x * u)
    x = np.where(q == 0.5, 0.0, np.where(upper, -x, x))
    return float(x) if x.ndim == 0 else x


def percentile_expansion(alpha, t, x0: float, a0: float, b0: float, b0prime: float):
    """x0 + b0 sqrt(t) z + (a0 - b0 b0' (1 - z^2) / 2) t with z = Phi^-1(alpha)."""
    t = np.asarray(t, dtype=float)
    require(t >= 0, "time must be non-negative", t)
    z = norm_ppf(alpha)
    out = x0 + b0 * np.sqrt(t) * z + (a0 - 0.5 * b0 * b0prime * (1.0 - z * z)) * t
    return float(out) if np.ndim(out) == 0 else out


def mode_line(t, x0: float, a0: float, b0: float, b0prime: float):
    """x0 + (a0 - 3/2 b0 b0') t, the short-time location of a mode."""
    return x0 + (a0 - 1.5 * b0 * b0prime) * np.asarray(t, dtype=float)


def scalar_coefficients(model, x, t: float = 0.0) -> tuple[float, float, float]:
    """(a, b, b') of a scalar SDE at x (Ito drift, diffusion, d b / d x)."""
    if isinstance(model, JetField):
        raise ModelError("scalar_coefficients needs an SdeModel (b' is not part of a 2-jet field)")
    if model.n != 1 or model.d != 1:
        raise ModelError(f"need a scalar SDE with one driver, got n={model.n}, d={model.d}")
    x = float(x)
    name = model.states[0]
    if model.form == "jet":
        # jet in (x, u): a = 1/2 d2/du2, b = d/du, b' = d2/(dx du)
        env = {name: Jet2.variable(x, 0, 2), model.symbols.drivers[0]: Jet2.variable(0.0, 1, 2), "t": t}
        j = model.gamma[0].eval_jet(env)
        H = j.hess_matrix()
        return float(0.5 * H[1, 1]), float(j.grad[1]), float(H[0, 1])
    ito = to_ito(model)
    a = float(np.asarray(ito.drift[0].eval_real({name: np.array([x]), "t": t})).reshape(-1)[0])
    bj = ito.diffusion[0][0].eval_jet({name: Jet2.variable(x, 0, 1), "t": t})
    return a, float(bj.value), float(bj.grad[0])


def lamperti_drift(model, x, t: float = 0.0) -> float:
    """Drift of Z = phi(X) with phi' = 1/b: a/b - b'/2, via the Ito pushforward through phi."""
    a, b, bp = scalar_coefficients(model, x, t)
    require(np.asarray(b) != 0, "diffusion coefficient vanishes", b)
    field_jet = to_jet_field(model)(np.array([float(x)]), t)
    phi = JetPoint(np.zeros(1), np.array([[1.0 / b]]), np.array([[-bp / (b * b)]]))
    drift, diff = extract_ab(pushforward(field_jet, phi))
    return float(drift[0])


# Monte Carlo --------------------------------------------------------------------------


@dataclass
class PercentileSpec:
    model: SdeModel
    alphas: Sequence[float]
    times: Sequence[float]
    M: int = 100_000
    dt: float = 2.0**-14
    antithetic: bool = False

    def __post_init__(self):
        if self.model.n != 1 or self.model.d != 1:
            raise ModelError("percentile analysis needs a scalar SDE with one driver")
        self.alphas = [float(a) for a in self.alphas]
        self.times = sorted(float(t) for t in self.times)
        if not self.alphas or not self.times:
            raise ConfigError("need at least one alpha and one time")
        if any(not 0 < a < 1 for a in self.alphas):
            raise ConfigError("alphas must lie in (0, 1)")
        if self.times[0] <= 0:
            raise ConfigError("times must be positive")
        if self.antithetic and self.M % 2:
            raise ConfigError("antithetic sampling needs an even number of paths")
        _, b0, _ = scalar_coefficients(self.model, self.model.x0[0])
        if b0 == 0:
            raise ModelError("the diffusion coefficient vanishes at x0; percentiles need b(x0) != 0")

    def step_plan(self) -> tuple[int, list[int]]:
        """Smallest dyadic step count with step <= dt putting every time on the grid."""
        T = self.times[-1]
        N = 1
        while T / N > self.dt:
            N *= 2
        while N <= 2**24:
            steps = [round(t / T * N) for t in self.times]
            if all(abs(k * T / N - t) <= 1e-12 * T for k, t in zip(steps, self.times)):
                return N, steps
            N *= 2
        raise ConfigError("times do not fit on a dyadic grid; choose times with dyadic ratios to the horizon")


@dataclass
class FanReport:
    alphas: list[float]
    times: list[float]
    expansion: np.ndarray
    mc: np.ndarray
    ci: np.ndarray
    medians: np.ndarray
    median_slope: float
    median_slope_free: float
    stratonovich_drift: float
    modes: np.ndarray
    mode_line: np.ndarray
    x0: float
    a0: float
    b0: float
    b0prime: float
    M: int
    diverged: int
    seed: int
    antithetic: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "alphas": self.alphas,
            "times": self.times,
            "x0": self.x0,
            "a0": self.a0,
            "b0": self.b0,
            "b0prime": self.b0prime,
            "expansion": self.expansion.tolist(),
            "mc_quantile": self.mc.tolist(),
            "mc_ci_halfwidth": self.ci.tolist(),
            "mc_median": self.medians.tolist(),
            "median_slope": self.median_slope,
            "median_slope_free_intercept": self.median_slope_free,
            "stratonovich_drift": self.stratonovich_drift,
            "kde_mode": self.modes.tolist(),
            "mode_line": self.mode_line.tolist(),
            "M": self.M,
            "diverged_paths": self.diverged,
            "seed": self.seed,
            "antithetic": self.antithetic,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def quantile_ci(sorted_x: np.ndarray, alpha: float, z: float = 1.96) -> float:
    """Half-width of the distribution-free order-statistic interval for a quantile."""
    M = sorted_x.size
    half = z * math.sqrt(M * alpha * (1 - alpha))
    lo = max(int(math.floor(M * alpha - half)), 0)
    hi = min(int(math.ceil(M * alpha + half)), M - 1)
    return 0.5 * float(sorted_x[hi] - sorted_x[lo])


def kde_mode(samples: np.ndarray, grid_points: int = 512) -> float:
    """Argmax of a Gaussian KDE with bandwidth 1.06 sd M^(-1/5) over the sample range."""
    samples = np.asarray(samples, dtype=float)
    factor = 1.06 * samples.size ** (-0.2)
    kde = gaussian_kde(samples, bw_method=factor)
    grid = np.linspace(samples.min(), samples.max(), grid_points)
    return float(grid[int(np.argmax(kde(grid)))])


def _fit_slope(times, values, x0):
    t = np.asarray(times)
    y = np.asarray(values) - x0
    anchored = float(np.dot(t, y) / np.dot(t, t))
    free = float(np.polyfit(t, np.asarray(values), 1)[0]) if len(t) > 1 else anchored
    return anchored, free


def mc_percentiles(spec: PercentileSpec, seed: int = 0) -> FanReport:
    """Simulate ``spec.M`` paths with the 2-jet scheme and compare with the expansion."""
    model = spec.model
    x0 = float(model.x0[0])
    a0, b0, bp = scalar_coefficients(model, x0)
    N, steps = spec.step_plan()
    T = spec.times[-1]
    grid = sample_grid(seed, 1, T, N, spec.M, antithetic=spec.antithetic)
    ts = simulate_2jet(to_jet_field(model), grid, model.x0, N, record=steps)
    keep = ~ts.diverged
    if not keep.any():
        raise ModelError("every path diverged")
    pos = {int(k): j for j, k in enumerate(ts.steps)}
    A, K = len(spec.alphas), len(spec.times)
    mc = np.empty((K, A))
    ci = np.empty((K, A))
    med = np.empty(K)
    modes = np.empty(K)
    for i, k in enumerate(steps):
        x = np.sort(ts.paths[keep, pos[k], 0])
        mc[i] = np.quantile(x, spec.alphas, method="linear")
        ci[i] = [quantile_ci(x, a) for a in spec.alphas]
        med[i] = np.quantile(x, 0.5, method="linear")
        modes[i] = kde_mode(x)
    times = np.asarray(spec.times)
    exp = np.array([[percentile_expansion(a, t, x0, a0, b0, bp) for a in spec.alphas] for t in times])
    slope, slope_free = _fit_slope(times, med, x0)
    return FanReport(
        alphas=list(spec.alphas),
        times=list(spec.times),
        expansion=exp,
        mc=mc,
        ci=ci,
        medians=med,
        median_slope=slope,
        median_slope_free=slope_free,
        stratonovich_drift=a0 - 0.5 * b0 * bp,
        modes=modes,
        mode_line=mode_line(times, x0, a0, b0, bp),
        x0=x0,
        a0=a0,
        b0=b0,
        b0prime=bp,
        M=spec.M,
        diverged=int((~keep).sum()),
        seed=int(seed),
        antithetic=spec.antithetic,
    )


def fan_curves(field, x0, alphas: Sequence[float], times: Sequence[float]) -> list[tuple[float, float, float]]:
    """Rows (alpha, t, gamma_{x0}(Phi^-1(alpha) sqrt(t))) using the field's curve."""
    field = to_jet_field(field)
    if field.n != 1 or field.d != 1:
        raise ModelError("fan curves need a scalar field with one driver")
    x = np.array([float(np.asarray(x0).reshape(-1)[0])])
    rows = []
    for a in alphas:
        z = norm_ppf(a)
        for t in times:
            require(np.asarray(t) >= 0, "time must be non-negative", t)
            u = np.array([z * math.sqrt(t)])
            rows.append((float(a), float(t), float(field.curve(x, u)[0])))
    return rows


def fan_csv(rows) -> str:
    out = io.StringIO()
    out.write(f"# format_version={FORMAT_VERSION}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["alpha", "t", "value"])
    for a, t, v in rows:
        w.writerow([repr(a), repr(t), repr(v)])
    return out.getvalue()
