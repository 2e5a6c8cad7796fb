"""Galerkin-truncated semilinear SPDE with diagonal linear part.

The state is the vector of the first N mode coefficients; modes ``0..D-1``
(the H1 block) receive the noise, the remaining modes (H2) only feel the
linear damping and the nonlinearity.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from levymix.levy_noise import JumpEvent, LevyConfig


@dataclass(frozen=True)
class SpectrumSpec:
    lambdas: np.ndarray
    D: int
    source: str = "explicit"

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if lam.ndim != 1 or lam.size < 1:
            raise ValueError("lambdas must be a non-empty 1-D sequence")
        if not np.all(lam > 0):
            raise ValueError("eigenvalues must be positive")
        if np.any(np.diff(lam) < 0):
            raise ValueError("eigenvalues must be ascending")
        if not 1 <= self.D <= lam.size:
            raise ValueError(f"need 1 <= D <= N, got D={self.D}, N={lam.size}")
        lam.setflags(write=False)
        object.__setattr__(self, "lambdas", lam)

    @property
    def N(self) -> int:
        return self.lambdas.size

    @property
    def lambda_1(self) -> float:
        return float(self.lambdas[0])

    @property
    def lambda_Dp1(self) -> float | None:
        return float(self.lambdas[self.D]) if self.N > self.D else None


def build_example_spectrum(d: int, N: int, D: int | None = None) -> SpectrumSpec:
    """N smallest Dirichlet-Laplacian eigenvalues |k|^2, k in N^d, on [0, pi]^d."""
    if d < 1 or N < 1:
        raise ValueError("need d >= 1 and N >= 1")
    bound = d
    while True:
        vals = _squares_up_to(d, bound)
        if len(vals) >= N:
            break
        bound *= 2
    lam = np.array(sorted(vals)[:N], dtype=float)
    return SpectrumSpec(lam, D if D is not None else min(N, 1), source=f"example_dirichlet:{d}")


def _squares_up_to(d: int, bound: int) -> list[int]:
    """All |k|^2 <= bound with k in {1, 2, ...}^d, with multiplicity."""
    kmax = math.isqrt(bound - (d - 1))
    out = []
    for k in itertools.product(range(1, kmax + 1), repeat=d):
        s = sum(c * c for c in k)
        if s <= bound:
            out.append(s)
    return out


@dataclass(frozen=True)
class NonlinearitySpec:
    """Bounded Lipschitz map F with certified ``f_sup`` and ``f_lip``.

    ``mode_tanh`` acts as ``x_i -> a * tanh(g * x_i)`` on the declared modes
    (all modes when ``modes`` is None) and as zero elsewhere.
    """

    kind: str = "zero"
    a: float = 0.0
    g: float = 0.0
    modes: tuple[int, ...] | None = None
    f_sup: float = 0.0
    f_lip: float = 0.0
    func: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False, repr=False)

    @classmethod
    def zero(cls) -> "NonlinearitySpec":
        return cls()

    @classmethod
    def mode_tanh(cls, a: float, g: float, N: int, modes=None) -> "NonlinearitySpec":
        if a < 0 or g < 0:
            raise ValueError("mode_tanh needs a >= 0 and g >= 0")
        if modes is not None:
            modes = tuple(sorted(set(int(m) for m in modes)))
            if modes and (modes[0] < 0 or modes[-1] >= N):
                raise ValueError(f"declared modes must lie in 0..{N - 1}")
        n_active = N if modes is None else len(modes)
        return cls("mode_tanh", a, g, modes, a * math.sqrt(n_active), a * g)

    @classmethod
    def table(cls, func, f_sup: float, f_lip: float) -> "NonlinearitySpec":
        """User-supplied F with declared constants (not checked)."""
        return cls("table", f_sup=f_sup, f_lip=f_lip, func=func)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros_like(X)
        if self.kind == "mode_tanh":
            if self.modes is None:
                return self.a * np.tanh(self.g * X)
            out = np.zeros_like(X)
            idx = list(self.modes)
            out[..., idx] = self.a * np.tanh(self.g * X[..., idx])
            return out
        return np.asarray(self.func(X), dtype=float)

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or (self.kind == "mode_tanh" and self.a == 0.0)


@dataclass(frozen=True)
class VerificationConfig:
    p: float | None = None
    M: float = 1.0
    d_small: float = 0.05
    horizon: float = 10.0
    replicas: int = 1000
    seed: int = 0
    k_max: int = 20
    gap0: float = 1e-3
    x0: dict = field(default_factory=lambda: {0: 1.0})
    y0: dict = field(default_factory=dict)
    observable: str = "tanh_mode:1:1.0"
    contraction_diagnostics: bool = True
    record_every: int = 100
    block_size: int = 4096


@dataclass(frozen=True)
class ModelConfig:
    levy: LevyConfig
    spectrum: SpectrumSpec
    nonlinearity: NonlinearitySpec = field(default_factory=NonlinearitySpec)
    T_refractory: float = 1.0
    dt: float = 1e-3
    verification: VerificationConfig = field(default_factory=VerificationConfig)

    def __post_init__(self):
        if self.spectrum.D != self.levy.D:
            raise ValueError(f"spectrum D={self.spectrum.D} does not match noise D={self.levy.D}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.T_refractory < 0:
            raise ValueError("T_refractory must be non-negative")
        v = self.verification
        if v.p is None:
            object.__setattr__(self, "verification", replace(v, p=self.levy.alpha / 2.0))
            v = self.verification
        if not 0 < v.p < self.levy.alpha:
            raise ValueError(f"moment order p must satisfy 0 < p < alpha={self.levy.alpha}, got {v.p}")
        if v.contraction_diagnostics and self.spectrum.N < self.D + 1:
            raise ValueError(
                f"contraction diagnostics need N >= D+1 (lambda_(D+1) undefined for N={self.N}, D={self.D})"
            )
        for m in list(v.x0) + list(v.y0):
            if not 0 <= m < self.N:
                raise ValueError(f"initial-state mode {m + 1} outside 1..{self.N}")

    @property
    def N(self) -> int:
        return self.spectrum.N

    @property
    def D(self) -> int:
        return self.levy.D

    @property
    def lambdas(self) -> np.ndarray:
        return self.spectrum.lambdas

    @property
    def f_lip(self) -> float:
        return self.nonlinearity.f_lip

    @property
    def f_sup(self) -> float:
        return self.nonlinearity.f_sup

    def initial_states(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.zeros(self.N)
        y = np.zeros(self.N)
        for m, v in self.verification.x0.items():
            x[m] = v
        for m, v in self.verification.y0.items():
            y[m] = v
        return x, y


@dataclass(frozen=True)
class State:
    coeffs: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim != 1 or not np.all(np.isfinite(c)):
            raise ValueError("state coefficients must be a finite 1-D vector")
        object.__setattr__(self, "coeffs", c)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))


def exp_euler(X: np.ndarray, h, lambdas: np.ndarray, F: NonlinearitySpec) -> np.ndarray:
    """Exponential Euler for dX = (-lambda X + F(X)) dt with F frozen at the start.

    ``h`` is a scalar or one step length per row of ``X``.
    """
    h = np.asarray(h, dtype=float)
    if h.ndim:
        h = h[:, None]
    decay = np.exp(-lambdas * h)
    out = decay * X
    if not F.is_zero:
        out += (-np.expm1(-lambdas * h) / lambdas) * F(X)
    return out


def evolve_step(state: State, h: float, noise_increment, model: ModelConfig) -> State:
    """One exponential-Euler step plus an additive noise increment on the first D modes."""
    if not h > 0:
        raise ValueError(f"step length must be positive, got {h}")
    if h > model.dt * (1 + 1e-12):
        raise ValueError(f"step {h} exceeds the configured dt {model.dt}")
    noise = np.asarray(noise_increment, dtype=float).reshape(-1)
    if noise.size != model.D:
        raise ValueError(f"noise increment must have {model.D} entries")
    x = exp_euler(state.coeffs, h, model.lambdas, model.nonlinearity)
    x[: model.D] += noise
    return State(x, state.time + h)


def apply_jump(state: State, event: JumpEvent) -> State:
    delta = np.asarray(event.delta, dtype=float).reshape(-1)
    x = state.coeffs.copy()
    x[: delta.size] += delta
    return State(x, state.time)


def split_H1_H2(state: State, D: int) -> tuple[np.ndarray, np.ndarray]:
    return state.coeffs[:D].copy(), state.coeffs[D:].copy()


@dataclass
class PathSample:
    times: np.ndarray
    states: np.ndarray
    events: list[JumpEvent]

    @property
    def coupling_times(self) -> np.ndarray:
        return np.array([e.time for e in self.events if e.is_coupling_time])


def simulate_path(
    x0: State, horizon: float, model: ModelConfig, rng: np.random.Generator, record_every: int = 1
) -> PathSample:
    """Single path on the dt grid with big jumps placed at their exact times."""
    from levymix.engine import EnsembleDriver

    if not horizon > 0:
        raise ValueError("horizon must be positive")
    times, states = [], []

    def rec(t, X, Y):
        times.append(t)
        states.append(X[0].copy())

    drv = EnsembleDriver(
        model, x0.coeffs[None, :], noise_rng=rng, log_events=True, recorder=rec, record_every=record_every
    )
    drv.run_until(horizon)
    return PathSample(np.array(times) + x0.time, np.array(states), drv.events[0])
