"""Vectorized ensemble driver shared by every simulation path in the package.

One driver advances R replicas of either a single copy X or a pair (X, Y)
on the dt grid.  Big jumps are placed at their exact Poisson times by
splitting the step; small noise is one increment per grid step.  In a pair
both copies see exactly the same noise; the only exception is the big jump
at a coupling time when ``couple`` is on, which is replaced by a maximal
coupling whose y side draws from a separate coupling stream.  The x side
always receives the shared jump, so the x path is bit-identical to a
single-copy run on the same noise stream.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from levymix.levy_noise import JumpEvent, gamma_K, sample_big_jump, sample_small_increment
from levymix.spde_model import ModelConfig, exp_euler

_EPS = np.finfo(float).eps


@dataclass
class BoundTracker:
    """Running check of the synchronous-pair distance bounds.

    Between coupling times both copies share all noise, so
    ``|X - Y|(t) <= exp(L e) d0`` and
    ``|X2 - Y2|(t) <= (exp(-lam e) + L exp(L e) / (lam + L)) d0``
    where ``e`` is the time since the segment start and ``d0`` the distance
    there.  Violations are counted beyond the multiplicative tolerance plus
    an accumulated floating-point floor.
    """

    checks: int = 0
    violations_full: int = 0
    violations_h2: int = 0
    worst_ratio_full: float = 0.0
    worst_ratio_h2: float = 0.0
    first_violation: tuple | None = None
    max_round_floor: float = 0.0


class EnsembleDriver:
    """Advance an ensemble of single paths or coupled pairs.

    Parameters
    ----------
    model : ModelConfig
    x0, y0 : array_like
        Initial states, shape ``(N,)`` (broadcast to ``replicas``) or ``(R, N)``.
        ``y0=None`` runs single copies.
    noise_rng : numpy.random.Generator
        Shared noise stream (small increments, big-jump times and sizes).
    coupling_rng : numpy.random.Generator, optional
        Stream for the maximal coupling; required when ``couple`` is True.
    couple : bool
        Replace the big jump at each coupling time by a maximal coupling.
        When False a pair evolves fully synchronously.
    k_max : int, optional
        Chain mode: record the pair at coupling times and retire a replica
        after its ``k_max``-th coupling time.
    """

    def __init__(
        self,
        model: ModelConfig,
        x0,
        y0=None,
        *,
        replicas: int | None = None,
        noise_rng: np.random.Generator,
        coupling_rng: np.random.Generator | None = None,
        couple: bool = False,
        k_max: int | None = None,
        track_bounds: bool = False,
        log_events: bool = False,
        recorder=None,
        record_every: int = 1,
        index_offset: int = 0,
        keep_chain_states: bool = False,
    ):
        self.model = model
        self.cfg = model.levy
        self.D = model.D
        self.dt = model.dt
        self.lambdas = model.lambdas
        self.F = model.nonlinearity
        self.gam = gamma_K(self.cfg)
        self.T = model.T_refractory
        self.X = self._init(x0, replicas)
        self.R = self.X.shape[0]
        self.pair = y0 is not None
        self.Y = self._init(y0, self.R) if self.pair else None
        if couple and not self.pair:
            raise ValueError("coupling needs two copies")
        if couple and coupling_rng is None:
            raise ValueError("coupling needs a coupling stream")
        self.couple = couple
        self.noise_rng = noise_rng
        self.coupling_rng = coupling_rng
        self.recorder = recorder
        self.record_every = max(1, int(record_every))
        self.index_offset = index_offset
        self.n = 0
        self.next_big = noise_rng.standard_exponential(self.R) / self.gam
        self.refr_end = np.full(self.R, self.T)
        self.k = np.zeros(self.R, dtype=np.int64)
        self.active = np.ones(self.R, dtype=bool)
        self.n_active = self.R
        self.big_jump_count = np.zeros(self.R, dtype=np.int64)
        self.coupling_attempts = 0
        self.coupling_successes = 0
        self.events = [[] for _ in range(self.R)] if log_events else None
        self.chain_states = [] if keep_chain_states else None

        lam = self.lambdas
        self._decay = np.exp(-lam * self.dt)
        self._phi = -np.expm1(-lam * self.dt) / lam

        self.k_max = k_max
        if k_max is not None:
            if not self.pair:
                raise ValueError("chain mode needs two copies")
            if k_max < 1:
                raise ValueError("k_max must be >= 1")
            shape = (self.R, k_max + 1)
            self.tau = np.full(shape, np.nan)
            self.dist = np.full(shape, np.nan)
            self.norm_x = np.full(shape, np.nan)
            self.norm_y = np.full(shape, np.nan)
            self.pre_sep = np.full(shape, np.nan)
            self.coupled = np.zeros(shape, dtype=bool)
            self.tau[:, 0] = 0.0
            self.dist[:, 0] = np.linalg.norm(self.X - self.Y, axis=1)
            self.norm_x[:, 0] = np.linalg.norm(self.X, axis=1)
            self.norm_y[:, 0] = np.linalg.norm(self.Y, axis=1)

        self.bounds = None
        if track_bounds:
            if not self.pair:
                raise ValueError("bound tracking needs two copies")
            if model.spectrum.lambda_Dp1 is None:
                raise ValueError("bound tracking needs N >= D+1")
            self.bounds = BoundTracker()
            self.seg_t0 = np.zeros(self.R)
            self.seg_d0 = np.linalg.norm(self.X - self.Y, axis=1)
            self.round_acc = np.zeros(self.R)

        if recorder is not None:
            recorder(0.0, self.X, self.Y)

    def _init(self, x0, replicas):
        X = np.array(x0, dtype=float)
        if X.ndim == 1:
            if X.size != self.model.N:
                raise ValueError(f"initial state must have N={self.model.N} entries")
            X = np.tile(X, (replicas or 1, 1))
        elif X.ndim != 2 or X.shape[1] != self.model.N:
            raise ValueError("initial states must have shape (R, N)")
        elif replicas is not None and X.shape[0] != replicas:
            raise ValueError("initial states do not match replica count")
        if not np.all(np.isfinite(X)):
            raise ValueError("initial states must be finite")
        return X

    @property
    def time(self) -> float:
        return self.n * self.dt

    # -- stepping ------------------------------------------------------------

    def _flow_dt(self, X):
        out = self._decay * X
        if not self.F.is_zero:
            out += self._phi * self.F(X)
        return out

    def step(self):
        t1 = (self.n + 1) * self.dt
        all_active = self.n_active == self.R
        cand = self.next_big <= t1
        if not all_active:
            cand &= self.active
        hits = np.flatnonzero(cand)
        if hits.size:
            hx = self.X[hits]
            hy = self.Y[hits] if self.pair else None
            cur = np.full(hits.size, self.n * self.dt)
            pend = np.arange(hits.size)
            while pend.size:
                rows = hits[pend]
                s = self.next_big[rows]
                hx[pend] = exp_euler(hx[pend], s - cur[pend], self.lambdas, self.F)
                if self.pair:
                    hy[pend] = exp_euler(hy[pend], s - cur[pend], self.lambdas, self.F)
                cur[pend] = s
                self._big_jumps(rows, pend, s, hx, hy)
                self.next_big[rows] = s + self.noise_rng.standard_exponential(rows.size) / self.gam
                keep = (self.next_big[rows] <= t1) & self.active[rows]
                pend = pend[keep]
            live = self.active[hits]
            h = t1 - cur[live]
            hx[live] = exp_euler(hx[live], h, self.lambdas, self.F)
            if self.pair:
                hy[live] = exp_euler(hy[live], h, self.lambdas, self.F)

        all_active = self.n_active == self.R
        idx = None if all_active else np.flatnonzero(self.active)
        n_live = self.R if all_active else idx.size
        xi = sample_small_increment(self.cfg, self.dt, self.noise_rng, n_live) if n_live else None
        if all_active:
            X = self._flow_dt(self.X)
            if hits.size:
                X[hits] = hx
            X[:, : self.D] += xi
            self.X = X
            if self.pair:
                Y = self._flow_dt(self.Y)
                if hits.size:
                    Y[hits] = hy
                Y[:, : self.D] += xi
                self.Y = Y
        else:
            if hits.size:
                # retired rows keep their state at retirement
                self.X[hits] = hx
                if self.pair:
                    self.Y[hits] = hy
            if n_live:
                new_x = self._flow_dt(self.X[idx])
                new_y = self._flow_dt(self.Y[idx]) if self.pair else None
                if hits.size:
                    pos = np.searchsorted(idx, hits[self.active[hits]])
                    new_x[pos] = self.X[hits[self.active[hits]]]
                    if self.pair:
                        new_y[pos] = self.Y[hits[self.active[hits]]]
                new_x[:, : self.D] += xi
                self.X[idx] = new_x
                if self.pair:
                    new_y[:, : self.D] += xi
                    self.Y[idx] = new_y
        self.n += 1
        if self.bounds is not None:
            rows = np.arange(self.R) if all_active else idx
            if rows.size:
                self._track(rows, self.X[rows], self.Y[rows], t1, advance=True)
        if self.recorder is not None and self.n % self.record_every == 0:
            self.recorder(t1, self.X, self.Y)

    def _big_jumps(self, rows, pend, s, hx, hy):
        """Apply the big jumps of ``rows`` at times ``s`` to the split-step buffers."""
        D = self.D
        eta = sample_big_jump(self.cfg, self.noise_rng, rows.size)
        self.big_jump_count[rows] += 1
        is_ct = s > self.refr_end[rows]
        if self.events is not None:
            for r, t, e, c in zip(rows, s, eta, is_ct):
                self.events[r].append(JumpEvent(float(t), e.copy(), True, bool(c)))
        ct = np.flatnonzero(is_ct)
        sync = np.flatnonzero(~is_ct) if ct.size else np.arange(rows.size)
        if sync.size:
            p = pend[sync]
            hx[p, :D] += eta[sync]
            if self.pair:
                hy[p, :D] += eta[sync]
        if not ct.size:
            return
        p = pend[ct]
        crow = rows[ct]
        if self.bounds is not None:
            self._track(crow, hx[p], hy[p], s[ct], advance=False)
        if self.couple:
            from levymix.coupling import maximal_coupling_batch

            cx = hx[p, :D]
            cy = hy[p, :D]
            if self.k_max is not None:
                pre = np.linalg.norm(cx - cy, axis=1)
            zx, zy, ok = maximal_coupling_batch(cx, cy, eta[ct], self.cfg, self.coupling_rng)
            hx[p, :D] = zx
            hy[p, :D] = zy
            self.coupling_attempts += ct.size
            self.coupling_successes += int(ok.sum())
        else:
            if self.k_max is not None:
                pre = np.linalg.norm(hx[p, :D] - hy[p, :D], axis=1)
            hx[p, :D] += eta[ct]
            if self.pair:
                hy[p, :D] += eta[ct]
            ok = np.zeros(ct.size, dtype=bool)
        self.refr_end[crow] = s[ct] + self.T
        self.k[crow] += 1
        if self.bounds is not None:
            self.seg_t0[crow] = s[ct]
            self.seg_d0[crow] = np.linalg.norm(hx[p] - hy[p], axis=1)
            self.round_acc[crow] = 0.0
        if self.k_max is not None:
            k = self.k[crow]
            self.tau[crow, k] = s[ct]
            self.dist[crow, k] = np.linalg.norm(hx[p] - hy[p], axis=1)
            self.norm_x[crow, k] = np.linalg.norm(hx[p], axis=1)
            self.norm_y[crow, k] = np.linalg.norm(hy[p], axis=1)
            self.pre_sep[crow, k] = pre
            self.coupled[crow, k] = ok
            if self.chain_states is not None:
                for r, j, t in zip(crow, p, s[ct]):
                    self.chain_states.append((int(r), float(t), hx[j].copy(), hy[j].copy()))
            done = crow[k >= self.k_max]
            if done.size:
                self.active[done] = False
                self.n_active -= done.size

    def _track(self, rows, xs, ys, t, advance):
        b = self.bounds
        L = self.model.f_lip
        lam = self.model.spectrum.lambda_Dp1
        diff = xs - ys
        d = np.linalg.norm(diff, axis=1)
        d2 = np.linalg.norm(diff[:, self.D :], axis=1)
        e = t - self.seg_t0[rows]
        d0 = self.seg_d0[rows]
        tol = 1.0 + 10.0 * self.dt * L
        floor = self.round_acc[rows]
        if advance:
            # per-step rounding of the flow and the shared additions, propagated by e^{L dt}
            nrm = np.linalg.norm(xs, axis=1) + np.linalg.norm(ys, axis=1)
            floor = floor * math.exp(L * self.dt) + 8.0 * _EPS * (nrm + 2.0 * self.dt * self.model.f_sup)
            self.round_acc[rows] = floor
        bound1 = np.exp(L * e) * d0 * tol + floor
        bound2 = (np.exp(-lam * e) + L * np.exp(L * e) / (lam + L)) * d0 * tol + floor
        b.checks += rows.size
        b.max_round_floor = max(b.max_round_floor, float(floor.max()))
        v1 = d > bound1
        v2 = d2 > bound2
        with np.errstate(divide="ignore", invalid="ignore"):
            r1 = np.where(bound1 > 0, d / bound1, 0.0)
            r2 = np.where(bound2 > 0, d2 / bound2, 0.0)
        b.worst_ratio_full = max(b.worst_ratio_full, float(r1.max()))
        b.worst_ratio_h2 = max(b.worst_ratio_h2, float(r2.max()))
        if v1.any() or v2.any():
            b.violations_full += int(v1.sum())
            b.violations_h2 += int(v2.sum())
            if b.first_violation is None:
                j = int(np.flatnonzero(v1 | v2)[0])
                tj = float(np.broadcast_to(t, rows.shape)[j])
                b.first_violation = (int(rows[j]) + self.index_offset, tj, float(d[j]), float(bound1[j]))

    # -- drivers ---------------------------------------------------------------

    def run_until(self, horizon: float):
        n_end = int(round(horizon / self.dt))
        while self.n < n_end:
            self.step()
        return self

    def run_chain(self, max_time: float):
        """Step until every replica reached ``k_max`` or ``max_time`` elapsed."""
        n_end = int(round(max_time / self.dt))
        while self.n_active and self.n < n_end:
            self.step()
        return self


def run_blocks(fn, n_replicas: int, block_size: int, threads: int = 1) -> list:
    """Run ``fn(block_index, slice)`` over fixed replica blocks, results in block order."""
    from levymix.rng import block_slices

    blocks = list(enumerate(block_slices(n_replicas, block_size)))
    if threads <= 1 or len(blocks) <= 1:
        return [fn(i, sl) for i, sl in blocks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda b: fn(*b), blocks))
