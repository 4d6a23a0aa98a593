"""Frozen fast dynamics: equilibrium measures, mixing rates, moment scans.

With the slow variable pinned at y the fast process solves

    dX = b(X, y) dt + sqrt(2) sigma(X, y) dW

on the order-one time scale.  For linear fast drift b = -A(y) x the
invariant measure is Gaussian(0, S(y)) with S(y) solving the Lyapunov
equation A S + S A* = 2 sigma sigma*; otherwise it is sampled by a
thinned long run of the frozen SDE.  Everything downstream (averaged
coefficients, correctors, the centering condition on H) integrates
against these equilibria.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lyapunov import solve_lyapunov, lyapunov_batch, lyapunov_residual
from .quadrature import MAX_TENSOR_DIM, gaussian_expect
from .rng import RngStream
from .systems import MultiscaleSystem, TestObservable, probe_grid

__all__ = [
    "solve_lyapunov",
    "lyapunov_batch",
    "lyapunov_residual",
    "FrozenEquilibrium",
    "frozen_equilibrium",
    "centering_residual",
    "MixingProfile",
    "estimate_mixing",
    "MomentTable",
    "moment_scan",
]

_FALLBACK_SAMPLES = 200_000


@dataclass
class FrozenEquilibrium:
    """Equilibrium of the frozen fast process at parameter y.

    kind "gaussian" stores the exact covariance (linear fast drift);
    kind "empirical" stores particles from a thinned simulation together
    with an effective-sample-size estimate in meta.
    """

    kind: str
    y: np.ndarray
    cov: np.ndarray | None = None
    particles: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if self.kind == "gaussian":
            if self.cov is None:
                raise ValueError("gaussian equilibrium needs a covariance")
            self.cov = np.asarray(self.cov, dtype=float)
            lam = np.linalg.eigvalsh(0.5 * (self.cov + self.cov.T))
            if lam[0] <= 0:
                raise ValueError("gaussian covariance must be positive definite")
        elif self.kind == "empirical":
            if self.particles is None or self.particles.ndim != 2:
                raise ValueError("empirical equilibrium needs (n, d) particles")
            self.particles = np.asarray(self.particles, dtype=float)
        else:
            raise ValueError(f"unknown equilibrium kind {self.kind!r}")

    @property
    def d(self) -> int:
        if self.kind == "gaussian":
            return self.cov.shape[0]
        return self.particles.shape[1]

    def expect(self, f, order: int = 20):
        """mu_y(f) for batched f mapping (n, d) -> (n, ...).

        Gaussian variant uses tensor Gauss-Hermite quadrature up to
        dimension 3 and falls back to a fixed-seed Monte Carlo average
        above that; empirical variant averages over particles.
        """
        if self.kind == "gaussian":
            if self.d <= MAX_TENSOR_DIM:
                return gaussian_expect(f, self.cov, order=order)
            stream = RngStream(
                int(self.meta.get("seed", 0)), int(self.meta.get("stream", 0))
            ).child(7)
            x = self.sample(_FALLBACK_SAMPLES, stream)
            return np.mean(np.asarray(f(x), dtype=float), axis=0)
        return np.mean(np.asarray(f(self.particles), dtype=float), axis=0)

    def sample(self, n: int, stream: RngStream) -> np.ndarray:
        gen = stream.generator()
        if self.kind == "gaussian":
            L = np.linalg.cholesky(self.cov)
            return gen.standard_normal((n, self.d)) @ L.T
        idx = gen.integers(0, self.particles.shape[0], size=n)
        return self.particles[idx]

    def second_moment(self) -> np.ndarray:
        if self.kind == "gaussian":
            return self.cov.copy()
        p = self.particles
        return p.T @ p / p.shape[0]


def _broadcast_y(y, n):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return np.broadcast_to(y, (n, y.shape[-1]))


def _frozen_step(sys, x, yb, dt, dW):
    drift = sys.b(x, yb)
    noise = np.einsum("...ik,...k->...i", sys.sigma(x, yb), dW)
    return x + drift * dt + np.sqrt(2.0) * noise


def _acf(series, lag):
    z = series - series.mean()
    if lag == 0:
        return 1.0
    denom = float(z @ z)
    if denom == 0:
        return 0.0
    return float(z[:-lag] @ z[lag:]) / denom


def frozen_equilibrium(
    sys: MultiscaleSystem,
    y,
    n: int = 4096,
    burn_in: float = 20.0,
    stream: RngStream = RngStream(0, 2),
    dt: float = 0.005,
) -> FrozenEquilibrium:
    """Equilibrium of the frozen fast process at y.

    Linear fast drift returns the exact Gaussian; otherwise a single
    chain is burned in for `burn_in` time units, a pilot autocorrelation
    of |x|^2 chooses the thinning stride (first lag below 0.2, capped),
    and n thinned states are collected.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if sys.flags.linear_fast and sys.fast_matrix is not None:
        A = np.asarray(sys.fast_matrix(y[None]), dtype=float)
        A = np.broadcast_to(A, (1, sys.d, sys.d))[0]
        x0 = np.zeros((1, sys.d))
        sig = np.broadcast_to(
            np.asarray(sys.sigma(x0, y[None]), dtype=float), (1, sys.d, sys.m)
        )[0]
        cov = solve_lyapunov(A, sig @ sig.T)
        return FrozenEquilibrium(
            kind="gaussian",
            y=y,
            cov=cov,
            meta={"seed": stream.seed, "stream": stream.stream},
        )

    chains = min(8, n)
    gen = stream.generator()
    x = np.zeros((chains, sys.d))
    yb = _broadcast_y(y, chains)
    n_burn = max(1, int(round(burn_in / dt)))
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n_burn):
            dW = np.sqrt(dt) * gen.standard_normal((chains, sys.m))
            x = _frozen_step(sys, x, yb, dt, dW)
        if not np.all(np.isfinite(x)):
            raise RuntimeError("frozen simulation diverged during burn-in")
        # pilot run to choose the per-chain thinning stride from the |x|^2
        # autocorrelation: first lag below 0.2, capped at 200 steps
        pilot = np.empty((2000, chains))
        for k in range(pilot.shape[0]):
            dW = np.sqrt(dt) * gen.standard_normal((chains, sys.m))
            x = _frozen_step(sys, x, yb, dt, dW)
            pilot[k] = np.sum(x * x, axis=1)
        thin = 200
        for lag in range(1, 201):
            rho = np.mean([_acf(pilot[:, c], lag) for c in range(chains)])
            if abs(rho) < 0.2:
                thin = lag
                break
        rounds = -(-n // chains)
        kept = np.empty((rounds, chains, sys.d))
        for i in range(rounds):
            for _ in range(thin):
                dW = np.sqrt(dt) * gen.standard_normal((chains, sys.m))
                x = _frozen_step(sys, x, yb, dt, dW)
            kept[i] = x
    particles = kept.reshape(rounds * chains, sys.d)[:n]
    if not np.all(np.isfinite(particles)):
        raise RuntimeError("frozen simulation diverged while sampling")
    r2 = np.sum(kept * kept, axis=2)
    rho1 = np.mean([_acf(r2[:, c], 1) for c in range(chains)])
    ess = n / max(1.0, 1.0 + 2.0 * max(rho1, 0.0))
    return FrozenEquilibrium(
        kind="empirical",
        y=y,
        particles=particles,
        meta={
            "seed": stream.seed,
            "stream": stream.stream,
            "dt": dt,
            "thin": thin,
            "ess": float(ess),
        },
    )


def centering_residual(sys: MultiscaleSystem, y, eq: FrozenEquilibrium) -> float:
    """|mu_y(H(., y))|: how far H is from satisfying the centering condition."""
    y = np.atleast_1d(np.asarray(y, dtype=float))

    def h_at(x):
        return sys.H(x, _broadcast_y(y, x.shape[0]))

    val = np.atleast_1d(np.asarray(eq.expect(h_at), dtype=float))
    return float(np.linalg.norm(val))


# ---------------------------------------------------------------------------
# mixing


@dataclass
class MixingProfile:
    """Decay of sup over a test bank of |E phi(X_t) - mu(phi)| on a lag grid.

    model is "exponential" (rate gamma in exp(-gamma t)), "polynomial"
    (rate m in t^-m), or "unresolved" when the decay never clears twice
    its standard error.
    """

    lags: np.ndarray
    decay: np.ndarray
    stderr: np.ndarray
    model: str
    rate: float | None
    residual: float | None
    meta: dict = field(default_factory=dict)

    def to_rows(self):
        return [
            (float(l), float(d), float(s))
            for l, d, s in zip(self.lags, self.decay, self.stderr)
        ]


def _fit_log_decay(ts, vals):
    """Least-squares slope/intercept of log(vals) against ts; returns SSE."""
    A = np.stack([ts, np.ones_like(ts)], axis=1)
    logv = np.log(vals)
    coef, *_ = np.linalg.lstsq(A, logv, rcond=None)
    resid = logv - A @ coef
    return coef[0], float(resid @ resid)


def estimate_mixing(
    sys: MultiscaleSystem,
    y,
    test_bank,
    lags,
    n_paths: int = 4096,
    stream: RngStream = RngStream(0, 2),
    dt: float | None = None,
    n_starts: int = 8,
) -> MixingProfile:
    """Fit the decay model of the frozen semigroup toward equilibrium.

    Paths start from a fixed dispersed set (scaled quasi-random points
    shaped by the equilibrium covariance), the bank expectation gap is
    estimated at each lag, lags below 2x their standard error are
    discarded, and exponential vs polynomial log-decay fits are compared
    by residual.
    """
    if len(test_bank) == 0:
        raise ValueError("test bank must be non-empty")
    lags = np.asarray(lags, dtype=float)
    if lags.ndim != 1 or np.any(lags <= 0) or np.any(np.diff(lags) <= 0):
        raise ValueError("lags must be positive and strictly increasing")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    eq = frozen_equilibrium(sys, y, stream=stream.child(1))
    S = eq.second_moment()
    L = np.linalg.cholesky(S + 1e-12 * np.eye(sys.d))
    starts = 3.0 * (probe_grid(sys.d, n_starts, box=1.0) @ L.T)

    mu_phi = []
    for phi in test_bank:
        mu_phi.append(
            np.asarray(
                eq.expect(lambda x, p=phi: p(x, _broadcast_y(y, x.shape[0]))),
                dtype=float,
            )
        )

    if dt is None:
        dt = min(0.01, float(lags[0]) / 20.0)
    per_start = max(1, n_paths // n_starts)
    x = np.repeat(starts, per_start, axis=0)
    n = x.shape[0]
    yb = _broadcast_y(y, n)
    gen = stream.generator()
    steps = np.rint(lags / dt).astype(int)
    if np.max(np.abs(steps * dt - lags)) > 1e-9 * max(1.0, lags[-1]):
        raise ValueError("each lag must be an integer multiple of dt")

    decay = np.empty(lags.shape[0])
    stderr = np.empty(lags.shape[0])
    k = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for j, target in enumerate(steps):
            while k < target:
                dW = np.sqrt(dt) * gen.standard_normal((n, sys.m))
                x = _frozen_step(sys, x, yb, dt, dW)
                k += 1
            gaps = np.empty(len(test_bank))
            ses = np.empty(len(test_bank))
            for i, phi in enumerate(test_bank):
                vals = np.asarray(phi(x, yb), dtype=float)
                gaps[i] = abs(float(np.mean(vals)) - float(mu_phi[i]))
                ses[i] = float(np.std(vals, ddof=1) / np.sqrt(n))
            best = int(np.argmax(gaps))
            decay[j] = gaps[best]
            stderr[j] = ses[best]

    keep = decay > 2.0 * stderr
    meta = {"dt": dt, "n_paths": n, "n_starts": n_starts}
    if np.sum(keep) < 3:
        return MixingProfile(lags, decay, stderr, "unresolved", None, None, meta)
    slope_e, sse_e = _fit_log_decay(lags[keep], decay[keep])
    slope_p, sse_p = _fit_log_decay(np.log(lags[keep]), decay[keep])
    if sse_e <= sse_p and slope_e < 0:
        return MixingProfile(
            lags, decay, stderr, "exponential", float(-slope_e), sse_e, meta
        )
    if slope_p < 0:
        return MixingProfile(
            lags, decay, stderr, "polynomial", float(-slope_p), sse_p, meta
        )
    return MixingProfile(lags, decay, stderr, "unresolved", None, None, meta)


# ---------------------------------------------------------------------------
# moment scans


@dataclass
class MomentTable:
    """Sample values of E(1 + |Z_t|^r) over an (eps, t) grid."""

    eps_grid: np.ndarray
    t_grid: np.ndarray
    values: np.ndarray  # (n_eps, n_t)
    n_failed: np.ndarray  # (n_eps,)
    r: float
    bounded: bool
    bound: float

    def to_rows(self):
        rows = []
        for i, e in enumerate(self.eps_grid):
            for j, t in enumerate(self.t_grid):
                rows.append((float(e), float(t), float(self.values[i, j])))
        return rows


def moment_scan(
    sys: MultiscaleSystem,
    eps_grid,
    t_grid,
    r: float,
    n_paths: int,
    stream: RngStream,
    z0=None,
    bound: float = np.inf,
    dt: float | None = None,
    scheme: str = "auto",
) -> MomentTable:
    """Tabulate E(1 + |Z_t^eps|^r) and flag whether it stays below `bound`."""
    from .engine import integrate_multiscale

    eps_grid = np.asarray(eps_grid, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    if z0 is None:
        z0 = np.zeros(sys.state_dim)
    values = np.empty((eps_grid.shape[0], t_grid.shape[0]))
    n_failed = np.zeros(eps_grid.shape[0], dtype=int)
    for i, eps in enumerate(eps_grid):
        dt_i = dt if dt is not None else eps**2 / 20.0
        ens = integrate_multiscale(
            sys, eps, z0, t_grid, n_paths, stream.child(i), dt=dt_i, scheme=scheme
        )
        n_failed[i] = int(np.sum(ens.failed))
        alive = ens.states[~ens.failed]
        mag = np.linalg.norm(alive, axis=-1)
        mom = 1.0 + np.mean(mag**r, axis=0)
        idx = [ens.time_index(t) for t in t_grid]
        values[i] = mom[idx]
    finite = np.isfinite(values)
    bounded = bool(np.all(finite) and np.all(values <= bound))
    return MomentTable(eps_grid, t_grid, values, n_failed, r, bounded, bound)
