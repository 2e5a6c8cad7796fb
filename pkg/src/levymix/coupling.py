"""Big-jump maximal coupling and the stopping-time bookkeeping of the coupling chain.

Between coupling times the two copies share every noise increment.  At a
coupling time the big jump of the y copy is drawn from a maximal coupling
of ``p_K(. - x1)`` and ``p_K(. - y1)`` where ``x1``, ``y1`` are the pre-jump
H1 components.  The chain ``S(k) = S(tau_k)`` (``tau_0 = 0``) is recorded
and all stopping times are first-hit indices on that chain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from levymix.levy_noise import (
    AssumptionDiagnosticError,
    LevyConfig,
    estimate_assumption_constants,
    gamma_K,
    pk_density,
    sample_big_jump,
)
from levymix.rng import substream
from levymix.spde_model import ModelConfig, State

# multiplicative slack on the product-contraction comparison (floating point only)
PRODUCT_REL_SLACK = 1e-9
REJECTION_CAP = 10**6


class RejectionCapError(AssumptionDiagnosticError):
    """Residual rejection sampler needed more than the allowed number of proposals."""


@dataclass(frozen=True)
class CoupledState:
    sx: State
    sy: State
    first_components_merged: bool = False

    def __post_init__(self):
        if self.sx.time != self.sy.time:
            raise ValueError("coupled states must share the same time")

    @property
    def time(self) -> float:
        return self.sx.time

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.sx.coeffs - self.sy.coeffs))


@dataclass(frozen=True)
class CouplingConstants:
    kappa: float
    beta0: float
    beta1: float
    beta2: float

    def __post_init__(self):
        if not (self.beta0 > 0 and self.beta1 > 0 and self.beta2 > 0):
            raise ValueError("coupling constants must be positive")
        if self.kappa < self.beta1:
            raise ValueError("kappa must be at least beta1")


@lru_cache(maxsize=32)
def _constants_cached(cfg: LevyConfig, M: float):
    return estimate_assumption_constants(cfg, M)


def coupling_constants(model: ModelConfig) -> CouplingConstants:
    """kappa = beta1 * exp(beta2 * f_lip * T) with the grid-estimated betas."""
    c = _constants_cached(model.levy, float(model.verification.M))
    kappa = c.beta1 * math.exp(c.beta2 * model.f_lip * model.T_refractory)
    return CouplingConstants(kappa, c.beta0, c.beta1, c.beta2)


def compute_delta_k(gap, lambda_Dp1: float, f_lip: float):
    """Contraction factor ``exp(-lam g) + L exp(L g) / (lam + L)`` over a gap ``g``."""
    g = np.asarray(gap, dtype=float)
    if np.any(~(g > 0)):
        raise ValueError("gap must be positive")
    out = np.exp(-lambda_Dp1 * g) + f_lip * np.exp(f_lip * g) / (lambda_Dp1 + f_lip)
    return float(out) if out.ndim == 0 else out


# -- maximal coupling ---------------------------------------------------------


def maximal_coupling_batch(
    cx: np.ndarray,
    cy: np.ndarray,
    eta: np.ndarray,
    cfg: LevyConfig,
    rng: np.random.Generator,
    max_iter: int = REJECTION_CAP,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Maximal coupling of ``p_K(. - cx)`` and ``p_K(. - cy)``, row by row.

    ``eta`` are jumps with law ``p_K`` supplied by the caller, so that
    ``zx = cx + eta`` has the x marginal.  ``rng`` supplies the acceptance
    uniforms and the residual proposals.
    """
    n = cx.shape[0]
    zx = cx + eta
    u = rng.random(n)
    p1 = pk_density(cfg, eta)
    p2 = pk_density(cfg, zx - cy)
    ok = u * p1 <= p2
    zy = zx.copy()
    bad = np.flatnonzero(~ok)
    if bad.size:
        zy[bad] = _residual(cx[bad], cy[bad], cfg, rng, max_iter)
    return zx, zy, ok


def _residual(cx, cy, cfg, rng, max_iter):
    """Rejection sampling of the normalized positive part of ``p2 - p1`` with proposal ``p2``."""
    n, D = cx.shape
    out = np.empty((n, D))
    tries = np.zeros(n, dtype=np.int64)
    pend = np.arange(n)
    batch = 16
    while pend.size:
        m = batch
        w = cy[pend][:, None, :] + sample_big_jump(cfg, rng, pend.size * m).reshape(pend.size, m, D)
        u = rng.random((pend.size, m))
        q1 = pk_density(cfg, w - cx[pend][:, None, :])
        q2 = pk_density(cfg, w - cy[pend][:, None, :])
        acc = u * q2 <= q2 - q1
        has = acc.any(axis=1)
        first = acc.argmax(axis=1)
        out[pend[has]] = w[has, first[has]]
        tries[pend] += np.where(has, first + 1, m)
        if tries[pend[~has]].max(initial=0) >= max_iter:
            total = int(tries.sum())
            accepted = int(n - (~has).sum())
            raise RejectionCapError(
                f"residual rejection sampler exceeded {max_iter} proposals; "
                f"acceptance rate {accepted}/{total} = {accepted / max(total, 1):.3g}"
            )
        pend = pend[~has]
        batch = min(batch * 2, 4096)
    return out


def maximal_coupling_draw(center_x, center_y, cfg: LevyConfig, rng: np.random.Generator):
    """One draw ``(zx, zy, coupled)`` from the maximal coupling."""
    cx = np.asarray(center_x, dtype=float).reshape(1, -1)
    cy = np.asarray(center_y, dtype=float).reshape(1, -1)
    if cx.shape[1] != cfg.D or cy.shape[1] != cfg.D:
        raise ValueError(f"centers must be {cfg.D}-vectors")
    if not (np.all(np.isfinite(cx)) and np.all(np.isfinite(cy))):
        raise ValueError("centers must be finite")
    eta = sample_big_jump(cfg, rng, 1)
    zx, zy, ok = maximal_coupling_batch(cx, cy, eta, cfg, rng)
    return zx[0], zy[0], bool(ok[0])


def apply_coupled_big_jump(cs: CoupledState, cfg: LevyConfig, rng: np.random.Generator):
    """Replace the H1 parts by a maximal-coupling draw centred at the pre-jump H1 parts."""
    D = cfg.D
    zx, zy, ok = maximal_coupling_draw(cs.sx.coeffs[:D], cs.sy.coeffs[:D], cfg, rng)
    x = cs.sx.coeffs.copy()
    y = cs.sy.coeffs.copy()
    x[:D] = zx
    y[:D] = zy
    merged = bool(np.array_equal(zx, zy))
    return CoupledState(State(x, cs.time), State(y, cs.time), merged), ok


def run_coupled_segment(cs: CoupledState, until: float, model: ModelConfig, rng: np.random.Generator):
    """Advance both copies to ``until`` (rounded to the dt grid) with fully shared noise."""
    from levymix.engine import EnsembleDriver

    span = until - cs.time
    if not span > 0:
        raise ValueError("until must be later than the current time")
    drv = EnsembleDriver(model, cs.sx.coeffs, cs.sy.coeffs, noise_rng=rng)
    drv.run_until(span)
    t = cs.time + drv.time
    x, y = drv.X[0], drv.Y[0]
    merged = cs.first_components_merged and bool(np.array_equal(x[: model.D], y[: model.D]))
    return CoupledState(State(x, t), State(y, t), merged)


# -- stopping times on the chain ------------------------------------------------


def _first(mask: np.ndarray) -> int | None:
    hit = np.flatnonzero(mask)
    return int(hit[0]) + 1 if hit.size else None


def sigma_tilde_at(nx, ny, start, M):
    """First k > 0 with ``|S^x(start+k)| + |S^y(start+k)| <= M`` (None if not observed)."""
    return _first(nx[start + 1 :] + ny[start + 1 :] <= M)


def sigma_at(dist, start, d):
    """First k > 0 with ``|S^x(start+k) - S^y(start+k)| <= d``."""
    return _first(dist[start + 1 :] <= d)


def sigma_hat_at(dist, deltas, start, nx=None, ny=None):
    """First k >= 1 with distance above ``(delta_start ... delta_{start+k-1}) * dist[start]``."""
    tail = dist[start + 1 :]
    prods = np.cumprod(deltas[start : start + tail.size]) * dist[start]
    bound = prods * (1.0 + PRODUCT_REL_SLACK)
    if nx is not None:
        bound = bound + 64 * np.finfo(float).eps * (nx[start + 1 :] + ny[start + 1 :])
    return _first(tail > bound)


def _compose(*parts):
    total = 0
    for p in parts:
        if p is None:
            return None
        total += p
    return total


@dataclass
class StoppingTimeRecord:
    """Observed coupling chain of one replica and its stopping times.

    Chain index 0 is the starting pair; entries beyond ``k_observed`` were not
    reached before the time cap.  Stopping times are chain indices, ``None``
    meaning "not hit within the observed chain" (censored).
    """

    tau_tilde: np.ndarray
    dist: np.ndarray
    norm_x: np.ndarray
    norm_y: np.ndarray
    coupled_flags: np.ndarray
    delta: np.ndarray
    M: float
    d: float
    sigma_tilde: int | None = None
    sigma: int | None = None
    sigma_hat: int | None = None
    sigma_dagger: int | None = None
    sigma_bar: int | None = None
    sigma_bar_seq: list = field(default_factory=list)

    @property
    def k_observed(self) -> int:
        return self.tau_tilde.size - 1


def _stopping(dist, nx, ny, deltas, M, d):
    st = sigma_tilde_at(nx, ny, 0, M)
    sg = sigma_at(dist, 0, d)
    sh = sigma_hat_at(dist, deltas, 0, nx, ny)
    sd = None
    if sg is not None:
        sd = _compose(sg, sigma_hat_at(dist, deltas, sg, nx, ny))
    sb = None
    if sd is not None:
        sb = _compose(sd, sigma_tilde_at(nx, ny, sd, M))
    seq = []
    cur = 0
    while True:
        s1 = sigma_at(dist, cur, d)
        step = None
        if s1 is not None:
            s2 = sigma_hat_at(dist, deltas, cur + s1, nx, ny)
            if s2 is not None:
                s3 = sigma_tilde_at(nx, ny, cur + s1 + s2, M)
                step = _compose(s1, s2, s3)
        if step is None:
            break
        cur += step
        seq.append(cur)
    return st, sg, sh, sd, sb, seq


def build_record(tau, dist, nx, ny, coupled, model: ModelConfig, M=None, d=None) -> StoppingTimeRecord:
    """Record from raw chain arrays (trailing NaN entries mark the unobserved part)."""
    tau = np.asarray(tau, dtype=float)
    n_obs = int(np.sum(np.isfinite(tau)))
    sl = slice(0, n_obs)
    gaps = np.diff(tau[sl])
    lam = model.spectrum.lambda_Dp1
    if lam is None:
        raise ValueError("stopping-time bookkeeping needs N >= D+1")
    deltas = compute_delta_k(gaps, lam, model.f_lip) if gaps.size else np.empty(0)
    rec = StoppingTimeRecord(
        tau[sl].copy(),
        np.asarray(dist, dtype=float)[sl].copy(),
        np.asarray(nx, dtype=float)[sl].copy(),
        np.asarray(ny, dtype=float)[sl].copy(),
        np.asarray(coupled, dtype=bool)[sl].copy(),
        np.atleast_1d(deltas),
        float(model.verification.M if M is None else M),
        float(model.verification.d_small if d is None else d),
    )
    return track_stopping_times(rec, rec.M, rec.d)


def track_stopping_times(record: StoppingTimeRecord, M: float, d: float) -> StoppingTimeRecord:
    """Recompute every stopping time of ``record`` for thresholds ``M`` and ``d``.

    Pure function of the chain data, so applying it twice gives the same record.
    """
    n = record.tau_tilde.size
    lengths = {record.dist.size, record.norm_x.size, record.norm_y.size, record.coupled_flags.size}
    if lengths != {n} or record.delta.size != max(n - 1, 0):
        raise ValueError("inconsistent record lengths")
    if n and np.any(np.diff(record.tau_tilde) <= 0):
        raise ValueError("coupling times must be strictly increasing")
    st, sg, sh, sd, sb, seq = _stopping(record.dist, record.norm_x, record.norm_y, record.delta, M, d)
    record.M, record.d = float(M), float(d)
    record.sigma_tilde, record.sigma, record.sigma_hat = st, sg, sh
    record.sigma_dagger, record.sigma_bar, record.sigma_bar_seq = sd, sb, seq
    return record


def run_coupled_chain(
    x: State,
    y: State,
    model: ModelConfig,
    k_max: int,
    rng: np.random.Generator,
    coupling_rng: np.random.Generator | None = None,
    max_time: float | None = None,
):
    """Coupled chain of one replica up to its ``k_max``-th coupling time.

    Returns the list of ``CoupledState`` at ``tau_1 .. tau_k`` and the
    ``StoppingTimeRecord``.  Coupling times not reached within ``max_time``
    are censored.
    """
    from levymix.engine import EnsembleDriver

    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if coupling_rng is None:
        coupling_rng = rng.spawn(1)[0]
    if max_time is None:
        max_time = default_chain_time(model, k_max)
    drv = EnsembleDriver(
        model,
        x.coeffs,
        y.coeffs,
        noise_rng=rng,
        coupling_rng=coupling_rng,
        couple=True,
        k_max=k_max,
        keep_chain_states=True,
    )
    drv.run_chain(max_time)
    chain = [
        CoupledState(State(sx, x.time + t), State(sy, x.time + t), bool(np.array_equal(sx[: model.D], sy[: model.D])))
        for _, t, sx, sy in drv.chain_states
    ]
    rec = build_record(drv.tau[0], drv.dist[0], drv.norm_x[0], drv.norm_y[0], drv.coupled[0], model)
    return chain, rec


def default_chain_time(model: ModelConfig, k_max: int) -> float:
    """Time cap that reaches ``k_max`` coupling times except with negligible probability."""
    g = gamma_K(model.levy)
    mean = k_max * (model.T_refractory + 1.0 / g)
    return mean + 8.0 * math.sqrt(k_max) / g + 20.0 / g


@dataclass
class ChainEnsemble:
    """Raw coupling-chain arrays of an ensemble, shape ``(R, k_max + 1)``."""

    tau: np.ndarray
    dist: np.ndarray
    norm_x: np.ndarray
    norm_y: np.ndarray
    pre_sep: np.ndarray
    coupled: np.ndarray
    k_max: int
    max_time: float
    coupling_attempts: int = 0
    coupling_successes: int = 0

    @property
    def replicas(self) -> int:
        return self.tau.shape[0]

    @property
    def k_observed(self) -> np.ndarray:
        return np.sum(np.isfinite(self.tau), axis=1) - 1

    def records(self, model: ModelConfig, M=None, d=None) -> list[StoppingTimeRecord]:
        return [
            build_record(self.tau[i], self.dist[i], self.norm_x[i], self.norm_y[i], self.coupled[i], model, M, d)
            for i in range(self.replicas)
        ]


def run_chain_ensemble(
    model: ModelConfig,
    x0,
    y0,
    replicas: int,
    seed: int,
    k_max: int,
    max_time: float | None = None,
    threads: int = 1,
    block_size: int | None = None,
    couple: bool = True,
) -> ChainEnsemble:
    """Coupled chains for ``replicas`` pairs; block ``b`` uses noise/coupling substreams ``b``."""
    from levymix.engine import EnsembleDriver, run_blocks

    if max_time is None:
        max_time = default_chain_time(model, k_max)
    bs = block_size or model.verification.block_size
    x0 = np.asarray(x0, dtype=float)
    y0 = np.asarray(y0, dtype=float)

    def one(b, sl):
        n = sl.stop - sl.start
        xb = x0 if x0.ndim == 1 else x0[sl]
        yb = y0 if y0.ndim == 1 else y0[sl]
        drv = EnsembleDriver(
            model,
            xb,
            yb,
            replicas=n,
            noise_rng=substream(seed, "noise", b),
            coupling_rng=substream(seed, "coupling", b),
            couple=couple,
            k_max=k_max,
        )
        drv.run_chain(max_time)
        return drv

    drvs = run_blocks(one, replicas, bs, threads)
    cat = lambda name: np.concatenate([getattr(d, name) for d in drvs])  # noqa: E731
    return ChainEnsemble(
        cat("tau"),
        cat("dist"),
        cat("norm_x"),
        cat("norm_y"),
        cat("pre_sep"),
        cat("coupled"),
        k_max,
        max_time,
        sum(d.coupling_attempts for d in drvs),
        sum(d.coupling_successes for d in drvs),
    )
