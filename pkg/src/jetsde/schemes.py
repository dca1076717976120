"""Brownian grids, the 2-jet and Euler schemes, and strong-convergence studies.

Randomness comes from a counter-based generator (Philox keyed by
``(seed, path)``): path ``p`` always sees the same stream of standard
normals, consumed in (step, driver) order on the finest grid, whatever the
number of paths, the chunking or the level being simulated.  Coarser
levels re-sum fine increments pairwise, so every level of a study is driven
by the same Brownian path.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from ._domain import lenient
from .errors import ConfigError, ModelError
from .models import JetField, SdeModel, to_jet_field

FORMAT_VERSION = 1
PATH_CHUNK = 4096
TIME_BLOCK = 1024


def _is_pow2(k: int) -> bool:
    return k >= 1 and (k & (k - 1)) == 0


def _pairwise_coarsen(fine: np.ndarray, ratio: int) -> np.ndarray:
    """Sum adjacent steps (axis 1) ``log2(ratio)`` times."""
    out = fine
    while ratio > 1:
        out = out[:, 0::2] + out[:, 1::2]
        ratio //= 2
    return out


@dataclass(frozen=True)
class BrownianGrid:
    """Seeded Brownian increments for ``M`` paths on a dyadic ladder of step counts."""

    seed: int
    d: int
    T: float
    finest_N: int
    M: int
    levels: tuple[int, ...] = ()
    antithetic: bool = False

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        if self.d < 1:
            raise ConfigError("need at least one driver")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ConfigError(f"horizon T must be positive, got {self.T}")
        if self.M < 1:
            raise ConfigError("need at least one path")
        if not (isinstance(self.finest_N, (int, np.integer)) and self.finest_N >= 1):
            raise ConfigError(f"finest_N must be a positive integer, got {self.finest_N}")
        levels = tuple(int(k) for k in (self.levels or (self.finest_N,)))
        object.__setattr__(self, "levels", levels)
        for k in levels:
            self._ratio(k)

    def _ratio(self, N: int) -> int:
        if N < 1 or self.finest_N % N or not _is_pow2(self.finest_N // N):
            raise ConfigError(
                f"level with {N} steps is not a power-of-two coarsening of {self.finest_N} steps"
            )
        return self.finest_N // N

    def dt(self, N: int | None = None) -> float:
        return self.T / (N or self.finest_N)

    def _generator(self, path: int) -> np.random.Generator:
        key = np.array([self.seed, path], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def _stream(self, path: int) -> tuple[int, float]:
        """(stream index, sign); antithetic grids pair path 2q+1 with -(path 2q)."""
        if self.antithetic:
            return path // 2, (-1.0 if path % 2 else 1.0)
        return path, 1.0

    def iter_increments(self, start: int, stop: int, N: int) -> Iterator[np.ndarray]:
        """Blocks of coarse increments, shape (paths, steps_in_block, d), in time order."""
        if not (0 <= start < stop <= self.M):
            raise ConfigError(f"path range [{start}, {stop}) outside 0..{self.M}")
        ratio = self._ratio(N)
        block = min(max(TIME_BLOCK, ratio), self.finest_N)
        scale = math.sqrt(self.dt())
        streams = [self._stream(p) for p in range(start, stop)]
        gens = [self._generator(q) for q, _ in streams]
        signs = np.array([sg for _, sg in streams])[:, None, None] * scale
        left = self.finest_N
        while left:
            size = min(block, left)
            left -= size
            fine = np.stack([g.standard_normal((size, self.d)) for g in gens]) * signs
            yield _pairwise_coarsen(fine, ratio)

    def increments(self, paths: Sequence[int] | range | None = None, N: int | None = None) -> np.ndarray:
        """All increments at level ``N`` for a contiguous path range, shape (P, N, d)."""
        N = N or self.finest_N
        paths = range(self.M) if paths is None else paths
        start, stop = paths[0], paths[-1] + 1
        if list(paths) != list(range(start, stop)):
            raise ConfigError("increments() needs a contiguous path range")
        return np.concatenate(list(self.iter_increments(start, stop, N)), axis=1)

    def endpoint(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """W_T for paths [start, stop), shape (P, d)."""
        stop = self.M if stop is None else stop
        total = np.zeros((stop - start, self.d))
        for blk in self.iter_increments(start, stop, self.finest_N):
            total += blk.sum(axis=1)
        return total


def sample_grid(seed: int, d: int, T: float, finest_N: int, M: int, levels=(), antithetic: bool = False) -> BrownianGrid:
    return BrownianGrid(int(seed), int(d), float(T), int(finest_N), int(M), tuple(levels), bool(antithetic))


@dataclass
class TrajectorySet:
    paths: np.ndarray
    times: np.ndarray
    steps: np.ndarray
    diverged: np.ndarray
    diverged_step: np.ndarray
    scheme: str
    model: str
    seed: int
    level: int
    states: tuple[str, ...]

    @property
    def final(self) -> np.ndarray:
        return self.paths[:, -1]

    @property
    def n_diverged(self) -> int:
        return int(self.diverged.sum())

    def to_csv(self, fh=None) -> str | None:
        """Write ``path, step, time, <states>, diverged`` rows; returns text if fh is None."""
        out = io.StringIO() if fh is None else fh
        out.write(f"# format_version={FORMAT_VERSION}\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["path", "step", "time", *self.states, "diverged"])
        for p in range(self.paths.shape[0]):
            flag = int(self.diverged[p])
            for j in range(self.paths.shape[1]):
                w.writerow(
                    [p, _fmt_step(self.steps[j]), repr(float(self.times[j]))]
                    + [repr(float(v)) for v in self.paths[p, j]]
                    + [flag]
                )
        return out.getvalue() if fh is None else None


def _fmt_step(s) -> str:
    s = float(s)
    return str(int(s)) if s.is_integer() else repr(s)


def _record_plan(N: int, record) -> np.ndarray:
    if isinstance(record, str):
        if record == "all":
            return np.arange(N + 1)
        if record == "final":
            return np.array([0, N])
        raise ConfigError(f"record must be 'all', 'final', a stride or step indices, got {record!r}")
    if not isinstance(record, (int, np.integer)):
        idx = np.unique(np.concatenate([[0], np.asarray(record, dtype=np.int64)]))
        if idx[0] < 0 or idx[-1] > N:
            raise ConfigError(f"recorded steps must lie in 0..{N}")
        return idx
    stride = int(record)
    if stride < 1:
        raise ConfigError("record stride must be positive")
    idx = np.arange(0, N + 1, stride)
    return idx if idx[-1] == N else np.append(idx, N)


def _apply_floors(x: np.ndarray, floors: Mapping[int, float]) -> None:
    for i, lo in floors.items():
        np.maximum(x[:, i], lo, out=x[:, i])


def _step_2jet(field: JetField, x, inc, t):
    if field.has_curve:
        return field.curve(x, inc, t)
    a, b = field.coefficients(x, t)
    return x + np.einsum("pia,pa->pi", b, inc) + (a / field.d) * np.sum(inc * inc, axis=1)[:, None]


def _step_euler(field: JetField, x, inc, t, dt):
    a, b = field.coefficients(x, t)
    return x + a * dt + np.einsum("pia,pa->pi", b, inc)


def _simulate(
    field: JetField,
    grid: BrownianGrid,
    x0,
    N: int,
    scheme: str,
    record="all",
    dense: int = 1,
    t0: float = 0.0,
) -> TrajectorySet:
    field = to_jet_field(field)
    if field.d != grid.d:
        raise ConfigError(f"model has {field.d} drivers, grid has {grid.d}")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != field.n:
        raise ConfigError(f"x0 has {x0.size} entries, model has {field.n} states")
    if dense < 1 or (dense > 1 and (scheme != "2jet" or (isinstance(record, str) and record == "final"))):
        raise ConfigError("dense output needs the 2-jet scheme and recorded steps")
    dt = grid.dt(N)
    plan = _record_plan(N, record)
    sub = np.arange(dense) / dense
    rec_steps = np.concatenate([k + sub for k in plan[:-1]] + [[plan[-1]]]) if dense > 1 else plan
    M, n = grid.M, field.n
    out = np.empty((M, rec_steps.size, n))
    diverged_step = np.full(M, -1, dtype=np.int64)
    want = np.zeros(N + 1, dtype=bool)
    want[plan] = True
    slot_of = {int(k): j * (dense if dense > 1 else 1) for j, k in enumerate(plan)}

    for start in range(0, M, PATH_CHUNK):
        stop = min(start + PATH_CHUNK, M)
        x = np.tile(x0, (stop - start, 1))
        out[start:stop, 0] = x
        dead = np.zeros(stop - start, dtype=bool)
        k = 0
        with lenient():
            for blk in grid.iter_increments(start, stop, N):
                for j in range(blk.shape[1]):
                    inc = blk[:, j]
                    t = t0 + k * dt
                    if dense > 1 and want[k] and k < N:
                        base = slot_of[k]
                        for s in range(1, dense):
                            out[start:stop, base + s] = _step_2jet(field, x, inc * sub[s], t)
                    if scheme == "2jet":
                        x = _step_2jet(field, x, inc, t)
                    else:
                        x = _step_euler(field, x, inc, t, dt)
                    x = np.array(x, dtype=float)
                    _apply_floors(x, field.floors)
                    k += 1
                    bad = ~np.isfinite(x).all(axis=1) & ~dead
                    if bad.any():
                        diverged_step[start:stop][bad] = k
                        dead |= bad
                    x[dead] = np.nan
                    if want[k]:
                        out[start:stop, slot_of[k]] = x
    diverged = diverged_step >= 0
    # intermediate points of a step that later diverged stay as computed (possibly finite)
    return TrajectorySet(
        paths=out,
        times=t0 + rec_steps * dt,
        steps=rec_steps,
        diverged=diverged,
        diverged_step=diverged_step,
        scheme=scheme,
        model=field.name,
        seed=grid.seed,
        level=N,
        states=field.states,
    )


def simulate_2jet(field, grid: BrownianGrid, x0, level: int, record="all", dense: int = 1, t0: float = 0.0):
    """X_{k+1} = gamma_{X_k}(dW_k); the full curve when known, else the canonical quadratic.

    ``dense = m`` also records gamma_{X_k}((j/m) dW_k), j = 1..m-1, inside each
    recorded step (the interpolation ``X_{t+eps} = gamma_{X_t}((eps/dt) dW)``).
    """
    return _simulate(field, grid, x0, level, "2jet", record, dense, t0)


def simulate_euler(field, grid: BrownianGrid, x0, level: int, record="all", t0: float = 0.0):
    """X_{k+1} = X_k + a(X_k) dt + b(X_k) dW_k."""
    return _simulate(field, grid, x0, level, "euler", record, 1, t0)


# closed forms ---------------------------------------------------------------------


def _param(params: Mapping[str, object], key: str, constants: Mapping[str, float]) -> float:
    if key not in params:
        raise ModelError(f"closed form is missing parameter {key!r}")
    v = params[key]
    if isinstance(v, str):
        if v not in constants:
            raise ModelError(f"closed-form parameter {key!r} refers to unknown constant {v!r}")
        return float(constants[v])
    return float(v)


def _gbm_closed(params, constants, x0, grid, start, stop):
    """S_T = S_0 exp((mu - sigma^2/2) T + sigma W_T), one driver per coordinate."""
    mu = _param(params, "mu", constants)
    sigma = _param(params, "sigma", constants)
    w = grid.endpoint(start, stop)
    return x0 * np.exp((mu - 0.5 * sigma**2) * grid.T + sigma * w)


def _rotation_closed(params, constants, x0, grid, start, stop):
    """dX = c X dt + J X dW (J the quarter turn): X_T = e^{(c+1/2)T} R(W_T) x0."""
    c = _param(params, "c", constants)
    w = grid.endpoint(start, stop)[:, 0]
    cos, sin = np.cos(w), np.sin(w)
    g = math.exp((c + 0.5) * grid.T)
    return g * np.stack([cos * x0[0] - sin * x0[1], sin * x0[0] + cos * x0[1]], axis=1)


def _ou_closed(params, constants, x0, grid, start, stop):
    """dX = -kappa X dt + sigma dW: X_T = e^{-kappa T} x0 + sigma int e^{-kappa(T-s)} dW_s.

    The stochastic integral is evaluated on the finest grid with the exact
    weight averaged over each step, which is the only part not in closed form.
    """
    kappa = _param(params, "kappa", constants)
    sigma = _param(params, "sigma", constants)
    N = grid.finest_N
    h = grid.dt()
    s = np.arange(N) * h
    if kappa == 0:
        weights = np.ones(N)
    else:
        weights = (np.exp(-kappa * (grid.T - s - h)) - np.exp(-kappa * (grid.T - s))) / (kappa * h)
    acc = np.zeros((stop - start, grid.d))
    k = 0
    for blk in grid.iter_increments(start, stop, N):
        m = blk.shape[1]
        acc += np.einsum("pkd,k->pd", blk, weights[k : k + m])
        k += m
    return math.exp(-kappa * grid.T) * x0 + sigma * acc


CLOSED_FORMS: dict[str, Callable] = {
    "gbm": _gbm_closed,
    "ou": _ou_closed,
    "rotation": _rotation_closed,
}


def closed_form_endpoint(model: SdeModel, grid: BrownianGrid, start: int = 0, stop: int | None = None):
    spec = model.closed_form
    if not spec:
        raise ModelError(f"model {model.name!r} has no registered closed form")
    kind = spec.get("kind")
    if kind not in CLOSED_FORMS:
        raise ModelError(f"unknown closed form {kind!r}; known: {sorted(CLOSED_FORMS)}")
    stop = grid.M if stop is None else stop
    return CLOSED_FORMS[kind](spec.get("params", {}), model.symbols.constants, model.x0, grid, start, stop)


# convergence ---------------------------------------------------------------------


@dataclass
class ConvergenceReport:
    levels: list[int]
    dts: list[float]
    rms: list[float]
    slope: float
    intercept: float
    M: int
    reference: str
    scheme: str
    seed: int
    T: float
    diverged: int
    model: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model": self.model,
            "scheme": self.scheme,
            "reference": self.reference,
            "seed": self.seed,
            "T": self.T,
            "M": self.M,
            "levels": self.levels,
            "dt": self.dts,
            "rms_error": self.rms,
            "slope": self.slope,
            "intercept": self.intercept,
            "diverged_paths": self.diverged,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def fit_slope(dts: Sequence[float], errors: Sequence[float]) -> tuple[float, float]:
    """Least-squares line through (log2 dt, log2 error)."""
    slope, intercept = np.polyfit(np.log2(dts), np.log2(errors), 1)
    return float(slope), float(intercept)


REFERENCES = ("finest-2jet", "finest-euler", "closed-form")


def convergence_study(
    model,
    levels: Sequence[int],
    M: int,
    reference: str = "finest-2jet",
    seed: int = 0,
    T: float = 1.0,
    x0=None,
    scheme: str = "2jet",
    ref_factor: int = 4,
) -> ConvergenceReport:
    """RMS error at T of ``scheme`` on each level against a coupled reference."""
    if reference not in REFERENCES:
        raise ConfigError(f"reference must be one of {REFERENCES}")
    if scheme not in ("2jet", "euler"):
        raise ConfigError("scheme must be '2jet' or 'euler'")
    levels = sorted(int(k) for k in levels)
    if len(set(levels)) != len(levels) or len(levels) < 2:
        raise ConfigError("need at least two distinct levels")
    field_ = to_jet_field(model)
    if x0 is None:
        if not isinstance(model, SdeModel):
            raise ConfigError("x0 is required when passing a bare field")
        x0 = model.x0
    x0 = np.asarray(x0, dtype=float)
    finest = levels[-1] * (ref_factor if reference != "closed-form" else 1)
    grid = sample_grid(seed, field_.d, T, finest, M, levels)

    if reference == "closed-form":
        if not isinstance(model, SdeModel):
            raise ConfigError("closed-form reference needs an SdeModel")
        ref = closed_form_endpoint(model, grid)
        ref_text = f"closed form ({model.closed_form['kind']})"
        ref_bad = np.zeros(M, dtype=bool)
    else:
        sim = simulate_2jet if reference == "finest-2jet" else simulate_euler
        rs = sim(field_, grid, x0, finest, record="final")
        ref, ref_bad = rs.final, rs.diverged
        ref_text = f"{reference} with {finest} steps"

    run = simulate_2jet if scheme == "2jet" else simulate_euler
    finals, bad = [], ref_bad.copy()
    for N in levels:
        ts = run(field_, grid, x0, N, record="final")
        finals.append(ts.final)
        bad |= ts.diverged
    keep = ~bad
    if not keep.any():
        raise ModelError("every path diverged")
    rms = [float(np.sqrt(np.mean(np.sum((f[keep] - ref[keep]) ** 2, axis=1)))) for f in finals]
    dts = [T / N for N in levels]
    slope, intercept = fit_slope(dts, rms)
    return ConvergenceReport(
        levels=levels,
        dts=dts,
        rms=rms,
        slope=slope,
        intercept=intercept,
        M=M,
        reference=ref_text,
        scheme=scheme,
        seed=int(seed),
        T=float(T),
        diverged=int(bad.sum()),
        model=field_.name,
    )
