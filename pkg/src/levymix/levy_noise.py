"""Rotationally symmetric alpha-stable jump noise.

The Levy measure is ``nu(dz) = c_nu * |z|**(-D-alpha) dz`` on R^D.  Jumps with
``|z| >= K`` ("big" jumps) arrive at rate ``gamma_K = nu({|z| >= K})`` and have
the normalized density ``p_K``; everything below ``K`` is simulated as a
compound Poisson term on ``[eps_small, K)`` plus an optional Gaussian stand-in
for the jumps below ``eps_small``.

Total-variation overlaps ``int |p_K(z - x1) - p_K(z - x2)| dz`` are computed by
piecewise quadrature (D = 1), by a two-variable spherical reduction (D >= 2) or
by a likelihood-ratio Monte Carlo estimate (any D).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.special import gammaln


TV_METHODS = ("quadrature", "spherical_reduction", "monte_carlo")


class AssumptionDiagnosticError(RuntimeError):
    """A numerical certificate for an assumption constant could not be produced."""


def sphere_area(D: int) -> float:
    """Surface area of the unit sphere in R^D (2 for D = 1, 2*pi for D = 2)."""
    return 2.0 * math.pi ** (D / 2.0) / math.gamma(D / 2.0)


@dataclass(frozen=True)
class LevyConfig:
    alpha: float
    D: int
    K: float
    c_nu: float = 1.0
    eps_small: float | None = None
    gaussian_correction: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must lie in the open interval (0, 2), got {self.alpha}")
        if int(self.D) != self.D or self.D < 1:
            raise ValueError(f"D must be a positive integer, got {self.D}")
        if not self.K > 0:
            raise ValueError(f"K must be positive, got {self.K}")
        if not self.c_nu > 0:
            raise ValueError(f"c_nu must be positive, got {self.c_nu}")
        if self.eps_small is None:
            object.__setattr__(self, "eps_small", 0.1 * self.K)
        if not 0.0 < self.eps_small < self.K:
            raise ValueError(f"eps_small must satisfy 0 < eps_small < K, got {self.eps_small}")
        object.__setattr__(self, "D", int(self.D))

    @property
    def sphere(self) -> float:
        return sphere_area(self.D)

    @property
    def density_const(self) -> float:
        """Normalizing constant of p_K: alpha * K**alpha / S_{D-1}."""
        return self.alpha * self.K**self.alpha / self.sphere

    @property
    def band_rate(self) -> float:
        """nu({eps_small <= |z| < K}), the mid-band jump intensity."""
        a = self.alpha
        return self.c_nu * self.sphere / a * (self.eps_small**-a - self.K**-a)

    @property
    def small_variance(self) -> float:
        """Per-coordinate variance rate of the jumps below eps_small."""
        a = self.alpha
        return self.c_nu * self.sphere / self.D * self.eps_small ** (2.0 - a) / (2.0 - a)


@dataclass(frozen=True)
class JumpEvent:
    time: float
    delta: np.ndarray
    is_big: bool = True
    is_coupling_time: bool = False

    def __post_init__(self):
        if self.is_coupling_time and not self.is_big:
            raise ValueError("a coupling time must be a big jump")


@dataclass(frozen=True)
class TVResult:
    value: float
    method: str
    error_estimate: float
    std_error: float | None = None

    def __post_init__(self):
        if not -self.error_estimate - 1e-12 <= self.value <= 2.0 + self.error_estimate + 1e-12:
            raise ValueError(f"TV overlap {self.value} outside [0, 2]")


def gamma_K(cfg: LevyConfig) -> float:
    """Rate of jumps with size at least K."""
    return cfg.c_nu * cfg.sphere * cfg.K**-cfg.alpha / cfg.alpha


def pk_density(cfg: LevyConfig, z) -> np.ndarray | float:
    """Normalized big-jump density p_K evaluated at ``z`` (last axis has length D)."""
    z = np.asarray(z, dtype=float)
    if cfg.D == 1 and (z.ndim == 0 or z.shape[-1] != 1):
        r = np.abs(z)
    else:
        if z.shape[-1] != cfg.D:
            raise ValueError(f"expected trailing dimension {cfg.D}, got shape {z.shape}")
        r = np.sqrt(np.sum(z * z, axis=-1))
    with np.errstate(divide="ignore"):
        dens = np.where(r >= cfg.K, cfg.density_const * r ** (-cfg.D - cfg.alpha), 0.0)
    return dens if dens.ndim else float(dens)


def _directions(rng: np.random.Generator, n: int, D: int) -> np.ndarray:
    if D == 1:
        return np.where(rng.random((n, 1)) < 0.5, -1.0, 1.0)
    g = rng.standard_normal((n, D))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def sample_big_jump(cfg: LevyConfig, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw jumps with density p_K: radius ``K * U**(-1/alpha)``, uniform direction."""
    n = 1 if size is None else int(size)
    u = 1.0 - rng.random(n)  # in (0, 1]
    radius = cfg.K * u ** (-1.0 / cfg.alpha)
    out = radius[:, None] * _directions(rng, n, cfg.D)
    return out[0] if size is None else out


def sample_small_increment(
    cfg: LevyConfig, dt: float, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    """Increment over ``dt`` of the jumps smaller than K.

    Compound Poisson on ``[eps_small, K)`` plus, if enabled, a centered
    Gaussian with per-coordinate variance ``dt * small_variance``.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    n = 1 if size is None else int(size)
    out = np.zeros((n, cfg.D))
    counts = rng.poisson(cfg.band_rate * dt, size=n)
    if counts.any():
        _add_band_jumps(cfg, counts, rng, out)
    if cfg.gaussian_correction:
        out += math.sqrt(dt * cfg.small_variance) * rng.standard_normal((n, cfg.D))
    return out[0] if size is None else out


_BAND_CHUNK = 1 << 16


def _add_band_jumps(cfg: LevyConfig, counts: np.ndarray, rng: np.random.Generator, out: np.ndarray):
    """Add ``counts[i]`` independent jumps with radii in ``[eps_small, K)`` to ``out[i]``.

    All jumps form one flat stream, cut into fixed chunks of ``_BAND_CHUNK``
    (cache-sized, so the in-place ufunc chain stays fast); each chunk is
    reduced onto the replicas whose jumps it holds.  Radii use the inverse
    CDF ``(a - v b)^(-1/alpha)``.
    """
    a = cfg.eps_small**-cfg.alpha
    b = a - cfg.K**-cfg.alpha
    power = -1.0 / cfg.alpha
    D = cfg.D
    live = np.flatnonzero(counts)
    ends = np.cumsum(counts[live])
    total = int(ends[-1])
    buf_u = np.empty(min(total, _BAND_CHUNK))
    buf_r = np.empty_like(buf_u)
    for c0 in range(0, total, _BAND_CHUNK):
        m = min(_BAND_CHUNK, total - c0)
        u, r = buf_u[:m], buf_r[:m]
        first = int(np.searchsorted(ends, c0, side="right"))
        last = int(np.searchsorted(ends, c0 + m - 1, side="right"))
        starts = np.concatenate(([0], ends[first:last] - c0))
        rng.random(out=u)
        if D == 1:
            # one uniform gives both the sign and the radius
            np.multiply(u, 2.0, out=r)
            np.subtract(r, np.floor(r), out=r)
            np.multiply(r, -b, out=r)
            np.add(r, a, out=r)
            np.power(r, power, out=r)
            np.subtract(u, 0.5, out=u)
            np.copysign(r, u, out=r)
            out[live[first : last + 1], 0] += np.add.reduceat(r, starts)
        else:
            np.multiply(u, -b, out=r)
            np.add(r, a, out=r)
            np.power(r, power, out=r)
            g = rng.standard_normal((D, m))
            r /= np.sqrt(np.einsum("ij,ij->j", g, g))
            g *= r
            out[live[first : last + 1]] += np.add.reduceat(g, starts, axis=1).T


def sample_big_jump_sum(cfg: LevyConfig, t: float, rng: np.random.Generator, size: int) -> np.ndarray:
    """Sum of all big jumps over a window of length ``t`` (Poisson(gamma_K t) of them)."""
    counts = rng.poisson(gamma_K(cfg) * t, size=size)
    out = np.zeros((size, cfg.D))
    total = int(counts.sum())
    if total:
        jumps = sample_big_jump(cfg, rng, total)
        owner = np.repeat(np.arange(size), counts)
        np.add.at(out, owner, jumps)
    return out


def sample_decomposition_increment(
    cfg: LevyConfig, t: float, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    """L_t from the big/small decomposition that drives the simulations."""
    if not t > 0:
        raise ValueError(f"t must be positive, got {t}")
    n = 1 if size is None else int(size)
    out = sample_big_jump_sum(cfg, t, rng, n) + sample_small_increment(cfg, t, rng, n)
    return out[0] if size is None else out


def characteristic_constant(alpha: float, D: int) -> float:
    """A with int (1 - cos<xi,z>) |z|^(-D-alpha) dz = A |xi|^alpha."""
    return math.exp(
        0.5 * D * math.log(math.pi)
        + gammaln(1.0 - alpha / 2.0)
        - math.log(alpha / 2.0)
        - alpha * math.log(2.0)
        - gammaln((D + alpha) / 2.0)
    )


def sample_positive_stable(beta: float, rng: np.random.Generator, size: int) -> np.ndarray:
    """Positive stable variates with Laplace transform exp(-s**beta), 0 < beta < 1 (Kanter)."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    u = math.pi * (1.0 - rng.random(size))  # (0, pi]
    u = np.minimum(u, math.pi * (1 - 1e-16))
    e = rng.standard_exponential(size)
    zol = (
        np.sin(beta * u) ** (beta / (1.0 - beta))
        * np.sin((1.0 - beta) * u)
        / np.sin(u) ** (1.0 / (1.0 - beta))
    )
    return (zol / e) ** ((1.0 - beta) / beta)


def sample_exact_increment(
    cfg: LevyConfig, t: float, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    """L_t drawn as a Brownian motion evaluated at an alpha/2-stable subordinator.

    Only used as an oracle for the decomposition sampler.
    """
    if not t > 0:
        raise ValueError(f"t must be positive, got {t}")
    if cfg.alpha >= 2.0:
        raise ValueError("alpha must be < 2 for the subordinated sampler")
    n = 1 if size is None else int(size)
    beta = cfg.alpha / 2.0
    # Laplace exponent of S_t is t * s0 * u**beta with s0 matching nu's normalization.
    s0 = cfg.c_nu * characteristic_constant(cfg.alpha, cfg.D) * 2.0**beta
    s_t = (t * s0) ** (1.0 / beta) * sample_positive_stable(beta, rng, n)
    out = np.sqrt(s_t)[:, None] * rng.standard_normal((n, cfg.D))
    return out[0] if size is None else out


def sample_coupling_gap(
    cfg: LevyConfig, T: float, rng: np.random.Generator, size: int | None = None
) -> np.ndarray | float:
    """Gap between successive coupling times: ``T + Exponential(gamma_K)``."""
    if T < 0:
        raise ValueError(f"T must be non-negative, got {T}")
    g = T + rng.standard_exponential(size) / gamma_K(cfg)
    return float(g) if size is None else g


# -- total variation overlap -------------------------------------------------


def _tv_quadrature_1d(cfg: LevyConfig, c1: float, c2: float) -> tuple[float, float]:
    if c1 == c2:
        return 0.0, 0.0
    K, a, C = cfg.K, cfg.alpha, cfg.density_const

    def p(z, c):
        r = abs(z - c)
        return C * r ** (-1.0 - a) if r >= K else 0.0

    def integrand(z):
        return abs(p(z, c1) - p(z, c2))

    cuts = sorted({c1 - K, c1 + K, c2 - K, c2 + K, 0.5 * (c1 + c2)})
    total = err = 0.0
    edges = [-math.inf] + cuts + [math.inf]
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi <= lo:
            continue
        mid = hi - 1.0 if math.isinf(lo) else lo + 1.0 if math.isinf(hi) else 0.5 * (lo + hi)
        inside = [abs(mid - c) < K for c in (c1, c2)]
        if all(inside):
            continue
        val, e = integrate.quad(integrand, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)
        total += val
        err += e
    return total, err


@lru_cache(maxsize=4096)
def _tv_spherical(alpha: float, D: int, K: float, s: float) -> tuple[float, float]:
    """TV overlap at separation s via f(s) = 2 - 4 g(s).

    g(s) is the p_K(. - s e1) mass of {z_1 <= s/2, |z| >= K}; with spherical
    coordinates around e1 only the radius and the polar angle remain.
    """
    if s == 0.0:
        return 0.0, 0.0
    C = alpha * K**alpha / sphere_area(D)
    ring = sphere_area(D - 1) if D > 1 else 1.0
    q = 0.5 * (D + alpha)

    def inner(r):
        c = s / (2.0 * r)
        th0 = 0.0 if c >= 1.0 else math.acos(c)

        def f(th):
            return math.sin(th) ** (D - 2) * (r * r - 2.0 * r * s * math.cos(th) + s * s) ** -q

        val, _ = integrate.quad(f, th0, math.pi, epsabs=1e-15, epsrel=1e-11, limit=200)
        return val

    # r = K w**(-1/alpha) turns the r**(-1-alpha) tail into a bounded integrand on (0, 1].
    def outer(w):
        r = K * w ** (-1.0 / alpha)
        jac = K / alpha * w ** (-1.0 / alpha - 1.0)
        return jac * r ** (D - 1) * inner(r)

    points = []
    if s / 2.0 > K:
        points.append((2.0 * K / s) ** alpha)
    g, err = integrate.quad(
        outer, 0.0, 1.0, epsabs=1e-13, epsrel=1e-11, limit=200, points=points or None
    )
    g *= C * ring
    err *= C * ring
    return 2.0 - 4.0 * g, 4.0 * err + 1e-12


def _tv_monte_carlo(cfg, x1, x2, rng, n):
    eta = sample_big_jump(cfg, rng, n)
    p_own = pk_density(cfg, eta)
    ratio1 = np.minimum(1.0, pk_density(cfg, eta + x1 - x2) / p_own)
    eta = sample_big_jump(cfg, rng, n)
    p_own = pk_density(cfg, eta)
    ratio2 = np.minimum(1.0, pk_density(cfg, eta + x2 - x1) / p_own)
    m = 0.5 * (ratio1.mean() + ratio2.mean())
    se = 2.0 * math.sqrt((ratio1.var(ddof=1) + ratio2.var(ddof=1)) / (4.0 * n))
    return 2.0 * (1.0 - m), se


def tv_overlap(
    cfg: LevyConfig,
    x1,
    x2,
    method: str = "auto",
    rng: np.random.Generator | None = None,
    n_samples: int = 100_000,
) -> TVResult:
    """``int |p_K(z - x1) - p_K(z - x2)| dz`` in [0, 2].

    ``auto`` picks quadrature for D = 1 and the spherical reduction otherwise.
    For Monte Carlo the ``error_estimate`` is three standard errors.
    """
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x1.shape != (cfg.D,) or x2.shape != (cfg.D,):
        raise ValueError(f"centers must be {cfg.D}-vectors")
    if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(x2))):
        raise ValueError("centers must be finite")
    if method == "auto":
        method = "quadrature" if cfg.D == 1 else "spherical_reduction"
    if method not in TV_METHODS:
        raise ValueError(f"unknown TV method {method!r}")
    if method == "quadrature":
        if cfg.D != 1:
            raise ValueError("quadrature TV is only available for D = 1")
        val, err = _tv_quadrature_1d(cfg, float(x1[0]), float(x2[0]))
        return TVResult(min(max(val, 0.0), 2.0), method, err + 1e-12)
    if method == "spherical_reduction":
        if cfg.D < 2:
            raise ValueError("spherical_reduction requires D >= 2")
        s = float(np.linalg.norm(x1 - x2))
        val, err = _tv_spherical(cfg.alpha, cfg.D, cfg.K, s)
        return TVResult(min(max(val, 0.0), 2.0), method, err)
    if rng is None:
        raise ValueError("monte_carlo TV needs an explicit random stream")
    val, se = _tv_monte_carlo(cfg, x1, x2, rng, int(n_samples))
    return TVResult(min(max(val, 0.0), 2.0), method, 3.0 * se, std_error=se)


def tv_profile(cfg: LevyConfig, s: float) -> TVResult:
    """TV overlap as a function of the center separation only."""
    x2 = np.zeros(cfg.D)
    x2[0] = s
    return tv_overlap(cfg, np.zeros(cfg.D), x2)


@dataclass
class AssumptionConstants:
    """Grid estimates of the overlap constants; unpacks as (beta0, beta1, beta2)."""

    beta0: float
    beta1: float
    beta2: float
    lipschitz_grid_max: float
    beta0_certified: float
    separations: np.ndarray = field(repr=False)
    tv_values: np.ndarray = field(repr=False)

    def __iter__(self):
        return iter((self.beta0, self.beta1, self.beta2))


def estimate_assumption_constants(
    cfg: LevyConfig, M: float, n_lip: int = 25, n_ball: int = 41, max_ball: int = 2000
) -> AssumptionConstants:
    """Estimate beta0 (overlap on the M-ball), beta1 (Lipschitz slope) and beta2 = 1."""
    if not M > 0:
        raise ValueError(f"M must be positive, got {M}")
    top = max(2.0 * M, cfg.K)
    decades = [10.0**e for e in range(-3, 3) if 10.0**e <= top]
    seps = np.unique(np.concatenate([np.geomspace(1e-3, top, n_lip), decades, [top]]))
    ratios = np.array([tv_profile(cfg, s).value / s for s in seps])
    # Richardson step towards the derivative at zero separation.
    h = 1e-3
    extrapolated = 2.0 * tv_profile(cfg, h / 2).value / (h / 2) - tv_profile(cfg, h).value / h
    c_k = float(max(ratios.max(), extrapolated))
    beta1 = max(c_k, 2.0 / cfg.K)

    n = n_ball
    while True:
        ball = np.linspace(0.0, M, n)
        tvs = np.array([tv_profile(cfg, s).value for s in ball])
        beta0 = float(tvs.max())
        certified = beta0 + beta1 * (ball[1] - ball[0]) / 2.0
        if certified < 2.0:
            break
        if n >= max_ball:
            raise AssumptionDiagnosticError(
                f"beta0 grid too coarse: max TV {beta0:.6f} plus Lipschitz slack reaches "
                f"{certified:.6f} >= 2 with {n} points on [0, {M}]"
            )
        n = min(2 * n - 1, max_ball)
    return AssumptionConstants(beta0, beta1, 1.0, c_k, certified, ball, tvs)
