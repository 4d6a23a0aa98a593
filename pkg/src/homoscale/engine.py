"""Path simulation for the two-scale pair and for limit diffusions.

The multiscale integrator advances

    dX = (eps^-2 b + eps^-1 c) dt + sqrt(2) eps^-1 sigma dW
    dY = (F + eps^-1 H) dt + sqrt(2) G dW

with one shared Brownian increment per step feeding both rows; the
cross-correlation between rows is part of the model and every scheme here
preserves it exactly in law.

Schemes
-------
``euler``
    Explicit Euler-Maruyama on the pair.  Stable only for dt <= eps^2/20;
    the bound is enforced unless ``allow_coarse_dt`` is set.
``strang_exact``
    For linear fast drift b = -A(y) x: half step of the slow drift, then
    the exact Gaussian transition of the frozen fast OU block sampled
    conditionally on the shared increment, then the second half step plus
    the slow noise.  The slow diffusion G is evaluated at the pre-update
    state so the step stays non-anticipating.
``kinetic_exact``
    For Langevin-type systems (H = x, F = G = 0): the joint Gaussian law
    of (X', int X dt, dW) over one step is sampled exactly with A, grad U
    frozen at the step start.  Removes both the eps^-2 stiffness and the
    eps^-1 slow coupling; when sigma = 0 and A is constant the scheme is
    exact to roundoff.
``auto``
    kinetic_exact for langevin flags, strang_exact for linear fast drift,
    euler otherwise.

Common random numbers across step sizes: with ``noise_refine = r`` each
step consumes r fine increments of variance dt/r and sums them, drawn in
fine-step order.  Two runs with the same stream and the same product
n_steps * r therefore see bit-identical Brownian paths, which is how the
convergence studies couple different eps onto one noise realization.

Per step the draw order is fixed: the shared-increment block first, then
any scheme residual block.  Diverging paths (non-finite or beyond
BLOWUP_NORM) are frozen at their last finite state and flagged; estimates
exclude them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .rng import RngStream
from .systems import MultiscaleSystem, TestObservable
from .lyapunov import lyapunov_batch

__all__ = [
    "TrajectoryEnsemble",
    "integrate_multiscale",
    "integrate_homogenized",
    "estimate_expectation",
    "save_ensemble",
    "load_ensemble",
    "export_csv",
]

BLOWUP_NORM = 1.0e12
EULER_CFL = 20.0
NOISE_CHUNK = 16
_GRID_RTOL = 1e-9


# ---------------------------------------------------------------------------
# ensemble container


@dataclass
class TrajectoryEnsemble:
    """States of n_paths trajectories recorded on a shared time grid.

    ``states`` has shape (n_paths, n_times, dim) with the slow block last:
    for a multiscale run dim = d + vartheta and ``split`` returns (x, y);
    for a homogenized run dims = (0, vartheta) and states hold y alone.
    ``failed`` marks paths that left the admissible region; their rows are
    frozen at the last finite state.
    """

    times: np.ndarray
    states: np.ndarray
    kind: str
    dims: tuple[int, int]
    eps: float | None = None
    failed: np.ndarray = field(default=None)  # type: ignore[assignment]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.failed is None:
            self.failed = np.zeros(self.states.shape[0], dtype=bool)
        self.failed = np.asarray(self.failed, dtype=bool)
        if self.states.ndim != 3:
            raise ValueError("states must have shape (n_paths, n_times, dim)")
        if self.states.shape[1] != self.times.shape[0]:
            raise ValueError("states and times disagree on n_times")
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("time grid must strictly increase from 0")
        d, vt = self.dims
        if self.states.shape[2] != d + vt:
            raise ValueError("state dimension does not match dims")
        alive = self.states[~self.failed]
        if alive.size and not np.all(np.isfinite(alive)):
            raise ValueError("non-finite state on a path not marked failed")

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_alive(self) -> int:
        return int(np.sum(~self.failed))

    def split(self, state=None):
        """Split (x, y) along the last axis."""
        s = self.states if state is None else state
        d = self.dims[0]
        return s[..., :d], s[..., d:]

    def time_index(self, t: float) -> int:
        """Index of the grid time nearest to t."""
        return int(np.argmin(np.abs(self.times - float(t))))

    def at(self, t: float) -> np.ndarray:
        return self.states[:, self.time_index(t), :]


# ---------------------------------------------------------------------------
# grid and noise plumbing


def _normalize_grid(t_grid, dt, default_substeps=2000):
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if t_grid.ndim != 1 or t_grid.size == 0:
        raise ValueError("t_grid must be a non-empty 1-d array")
    if t_grid[0] <= 0 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing and positive")
    T = float(t_grid[-1])
    if dt is None:
        gaps = np.diff(np.concatenate(([0.0], t_grid)))
        if np.max(np.abs(gaps - gaps[0])) > _GRID_RTOL * max(1.0, T):
            raise ValueError("pass dt explicitly for a non-uniform t_grid")
        gap = float(gaps[0])
        dt = gap / max(1, int(np.ceil(gap / (T / default_substeps))))
    dt = float(dt)
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_steps = int(round(T / dt))
    scale = max(1.0, T)
    if abs(n_steps * dt - T) > _GRID_RTOL * scale:
        raise ValueError(f"dt={dt!r} does not divide the horizon T={T!r}")
    idx = np.rint(t_grid / dt).astype(int)
    if np.max(np.abs(idx * dt - t_grid)) > _GRID_RTOL * scale:
        raise ValueError("every output time must be an integer multiple of dt")
    return t_grid, dt, n_steps, idx


def _draw_increments(gen, refine, n, m, dt):
    """Sum of `refine` fine Gaussian increments, drawn in fine-step order."""
    dt_fine = dt / refine
    if refine == 1:
        block = gen.standard_normal((n, m))
    else:
        block = np.zeros((n, m))
        done = 0
        while done < refine:
            k = min(NOISE_CHUNK, refine - done)
            block += gen.standard_normal((k, n, m)).sum(axis=0)
            done += k
    return np.sqrt(dt_fine) * block


def _chol_psd(S):
    """Factor L with L L^T = S for symmetric PSD S; tolerant of zero modes."""
    d = S.shape[-1]
    diag = np.einsum("...ii->...", S) / d
    jit = np.maximum(diag, 0.0) * 1e-12
    try:
        return np.linalg.cholesky(S + jit[..., None, None] * np.eye(d))
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(S)
        root = np.sqrt(np.clip(w, 0.0, None))
        return V * root[..., None, :]


# ---------------------------------------------------------------------------
# steppers


def _const_is_zero(const) -> bool:
    return const is not None and not np.any(const)


class _EulerStepper:
    def __init__(self, sys: MultiscaleSystem, eps: float, dt: float):
        self.sys = sys
        self.eps = eps
        self.dt = dt
        self.c_zero = _const_is_zero(sys.c.constant)
        self.F_zero = _const_is_zero(sys.F.constant)
        self.H_zero = _const_is_zero(sys.H.constant)
        self.G_zero = _const_is_zero(sys.G.constant)
        self.sig_const = sys.sigma.constant
        self.G_const = sys.G.constant
        # systems whose slow row is the centered fast drift reuse b(x, y)
        self.center = None
        if sys.metadata.get("H_equals_b_minus_bbar"):
            if sys.d != sys.vartheta:
                raise ValueError("H_equals_b_minus_bbar needs d == vartheta")
            self.center = np.asarray(sys.metadata["b_bar"], dtype=float)

    @staticmethod
    def _noise(field, const, x, y, dW):
        if const is not None:
            if const.shape == (1, 1):
                return const[0, 0] * dW
            return np.einsum("ik,...k->...i", const, dW)
        return np.einsum("...ik,...k->...i", field(x, y), dW)

    def step(self, x, y, dW, gen):
        sys, eps, dt = self.sys, self.eps, self.dt
        bv = sys.b(x, y)
        drift_x = bv * (dt / eps**2)
        if not self.c_zero:
            drift_x = drift_x + sys.c(x, y) * (dt / eps)
        if self.center is not None:
            drift_y = (bv - self.center) * (dt / eps)
        elif self.H_zero:
            drift_y = 0.0
        else:
            drift_y = sys.H(x, y) * (dt / eps)
        if not self.F_zero:
            drift_y = drift_y + sys.F(x, y) * dt
        noise_x = self._noise(sys.sigma, self.sig_const, x, y, dW)
        x_new = x + drift_x + (np.sqrt(2.0) / eps) * noise_x
        if self.G_zero:
            y_new = y + drift_y
        else:
            noise_y = self._noise(sys.G, self.G_const, x, y, dW)
            y_new = y + drift_y + np.sqrt(2.0) * noise_y
        return x_new, y_new


class _FrozenFastBlock:
    """Exact Gaussian data of the frozen fast OU transition over one step.

    For fixed (A, sigma) and duration dt the fast row is an OU bridge:
    E = exp(-A dt / eps^2), equilibrium covariance S solving
    A S + S A* = sigma sigma*, step covariance S - E S E*, and
    cross-covariance with the shared increment C = sqrt(2) eps A^-1 (I-E) sigma.
    Sampling conditions on the realized dW so the slow row sees the same
    increment the fast row consumed.
    """

    def __init__(self, A, sigma, eps, dt):
        d = A.shape[-1]
        self.d = d
        self.eps = eps
        self.dt = dt
        E = scipy.linalg.expm(-A * (dt / eps**2))
        if E.ndim == 2:
            E = E[None]
            A = A[None]
            sigma = sigma[None] if sigma.ndim == 2 else sigma
        M = sigma @ np.swapaxes(sigma, -1, -2)
        S = lyapunov_batch(A, M)
        self.E = E
        self.Ainv = np.linalg.inv(A)
        S_step = S - E @ S @ np.swapaxes(E, -1, -2)
        eye = np.eye(d)
        C = np.sqrt(2.0) * eps * (self.Ainv @ (eye - E) @ sigma)
        cond = S_step - (C @ np.swapaxes(C, -1, -2)) / dt
        self.C = C
        self.L = _chol_psd(0.5 * (cond + np.swapaxes(cond, -1, -2)))

    def mean_shift(self, x_rel):
        return np.einsum("...ik,...k->...i", self.E, x_rel)

    def sample(self, x_rel, dW, xi):
        mean = self.mean_shift(x_rel)
        mean = mean + np.einsum("...ik,...k->...i", self.C, dW) / self.dt
        return mean + np.einsum("...ik,...k->...i", self.L, xi)


class _StrangExactStepper:
    """Slow half-drift / exact frozen fast step / slow half-drift + noise."""

    def __init__(self, sys: MultiscaleSystem, eps: float, dt: float):
        if sys.fast_matrix is None:
            raise ValueError("strang_exact needs a linear fast drift (fast_matrix)")
        self.sys = sys
        self.eps = eps
        self.dt = dt
        self.block = None
        # averaging systems have c = H = 0; skip the dead field calls
        self.averaging = sys.flags.averaging
        if sys.fast_matrix_constant:
            y0 = np.zeros((1, sys.vartheta))
            x0 = np.zeros((1, sys.d))
            A = np.broadcast_to(
                np.asarray(sys.fast_matrix(y0), dtype=float), (1, sys.d, sys.d)
            )
            sig = np.broadcast_to(
                np.asarray(sys.sigma(x0, y0), dtype=float), (1, sys.d, sys.m)
            )
            self.block = _FrozenFastBlock(A, sig, eps, dt)
        # scalar fast-path constants (d = m = 1, frozen block)
        self.scalars = None
        if self.block is not None and sys.d == 1 and sys.m == 1:
            b = self.block
            self.scalars = (
                float(b.E[0, 0, 0]),
                float(b.C[0, 0, 0]) / dt,
                float(b.L[0, 0, 0]),
                float(b.Ainv[0, 0, 0]),
            )

    def _slow_drift(self, x, y):
        sys = self.sys
        if self.averaging:
            return sys.F(x, y)
        return sys.F(x, y) + sys.H(x, y) / self.eps

    def step(self, x, y, dW, gen):
        sys, eps, dt = self.sys, self.eps, self.dt
        half = 0.5 * dt
        y_half = y + self._slow_drift(x, y) * half
        sig_slow = sys.G(x, y_half)
        xi = gen.standard_normal(x.shape)
        if self.scalars is not None:
            e, cfac, ell, ainv = self.scalars
            if self.averaging:
                x_new = e * x + cfac * dW + ell * xi
            else:
                x_star = (eps * ainv) * sys.c(x, y_half)
                x_new = x_star + e * (x - x_star) + cfac * dW + ell * xi
            noise_slow = np.sqrt(2.0) * sig_slow[..., 0] * dW
        else:
            block = self.block
            if block is None:
                A = np.asarray(sys.fast_matrix(y_half), dtype=float)
                A = np.broadcast_to(A, x.shape[:-1] + (sys.d, sys.d))
                sig = np.asarray(sys.sigma(x, y_half), dtype=float)
                sig = np.broadcast_to(sig, x.shape[:-1] + (sys.d, sys.m))
                block = _FrozenFastBlock(A, sig, eps, dt)
            if self.averaging:
                x_new = block.sample(x, dW, xi)
            else:
                cv = sys.c(x, y_half)
                x_star = eps * np.einsum("...ik,...k->...i", block.Ainv, cv)
                x_new = x_star + block.sample(x - x_star, dW, xi)
            noise_slow = np.sqrt(2.0) * np.einsum("...ik,...k->...i", sig_slow, dW)
        y_new = y_half + self._slow_drift(x_new, y_half) * half
        y_new = y_new + noise_slow
        return x_new, y_new


def _phi_series(u):
    """Stable brackets for the scalar kinetic covariances.

    Returns (e1, e2, f, c1, g1) where with E = exp(-u)
      e1 = 1 - E,  e2 = 1 - E^2,
      f  = u - 2(1-E) + (1-E^2)/2      (leading u^3/3),
      c1 = (1-E) - (1-E^2)/2           (leading u^2/2),
      g1 = u - (1-E)                   (leading u^2/2).
    Small-u branches use series to avoid catastrophic cancellation.
    """
    u = np.asarray(u, dtype=float)
    small = u < 1e-3
    e1 = -np.expm1(-u)
    e2 = -np.expm1(-2.0 * u)
    f = u - 2.0 * e1 + 0.5 * e2
    c1 = e1 - 0.5 * e2
    g1 = u - e1
    u2 = u * u
    f_s = u2 * u * (1.0 / 3.0 - u / 4.0 + 7.0 * u2 / 60.0)
    c_s = u2 * (0.5 - u / 2.0 + 7.0 * u2 / 24.0)
    g_s = u2 * (0.5 - u / 6.0 + u2 / 24.0)
    return (
        e1,
        e2,
        np.where(small, f_s, f),
        np.where(small, c_s, c1),
        np.where(small, g_s, g1),
    )


class _KineticScalarStepper:
    """d = m = 1 Langevin step via closed-form joint Gaussian."""

    def __init__(self, sys: MultiscaleSystem, eps: float, dt: float):
        self.sys = sys
        self.eps = eps
        self.dt = dt

    def step(self, x, y, dW, gen):
        sys, eps, dt = self.sys, self.eps, self.dt
        h = np.asarray(sys.fast_matrix(y), dtype=float)[..., 0, 0]
        h = np.broadcast_to(h, x[..., 0].shape)
        sig = np.asarray(sys.sigma(x, y), dtype=float)[..., 0, 0]
        sig = np.broadcast_to(sig, h.shape)
        cv = sys.c(x, y)[..., 0]
        a = h / eps**2
        u = a * dt
        g = np.sqrt(2.0) * sig / eps
        e1, e2, f, c1, g1 = _phi_series(u)
        E = 1.0 - e1
        x_star = eps * cv / h
        rel = x[..., 0] - x_star
        mean_x = x_star + E * rel
        mean_i = dt * x_star + (e1 / a) * rel
        var_x = g**2 * e2 / (2.0 * a)
        cov_xi = g**2 * c1 / a**2
        var_i = g**2 * f / a**3
        cov_xw = g * e1 / a
        cov_iw = g * g1 / a**2
        w = dW[..., 0]
        mean_x = mean_x + cov_xw * w / dt
        mean_i = mean_i + cov_iw * w / dt
        q11 = np.maximum(var_x - cov_xw**2 / dt, 0.0)
        q21 = cov_xi - cov_xw * cov_iw / dt
        q22 = var_i - cov_iw**2 / dt
        l11 = np.sqrt(q11)
        safe = l11 > 0
        l21 = np.where(safe, q21 / np.where(safe, l11, 1.0), 0.0)
        l22 = np.sqrt(np.maximum(q22 - l21**2, 0.0))
        xi = gen.standard_normal(h.shape + (2,))
        zx = l11 * xi[..., 0]
        zi = l21 * xi[..., 0] + l22 * xi[..., 1]
        x_new = (mean_x + zx)[..., None]
        i_int = (mean_i + zi)[..., None]
        y_new = y + i_int / eps
        return x_new, y_new


class _KineticMatrixStepper:
    """General-d Langevin step via augmented-exponential covariances.

    State (X, I) with I = int X dt satisfies a linear SDE with block drift
    Abar = [[-A/eps^2, 0], [I, 0]] and noise B = [sqrt(2)/eps sigma; 0].
    exp(Abar dt) provides the deterministic propagator, one augmented
    exponential provides the step covariance, another the covariance with
    the shared increment; the pair (X', I) is then drawn conditionally on
    the realized dW.
    """

    def __init__(self, sys: MultiscaleSystem, eps: float, dt: float):
        self.sys = sys
        self.eps = eps
        self.dt = dt
        self.cache = None
        if sys.fast_matrix_constant:
            y0 = np.zeros((1, sys.vartheta))
            x0 = np.zeros((1, sys.d))
            A = np.broadcast_to(
                np.asarray(sys.fast_matrix(y0), dtype=float), (1, sys.d, sys.d)
            )
            sig = np.broadcast_to(
                np.asarray(sys.sigma(x0, y0), dtype=float), (1, sys.d, sys.m)
            )
            self.cache = self._prepare(A, sig)

    def _prepare(self, A, sig):
        eps, dt = self.eps, self.dt
        d = self.sys.d
        m = self.sys.m
        n = A.shape[0]
        M = -A / eps**2
        Abar = np.zeros((n, 2 * d, 2 * d))
        Abar[:, :d, :d] = M
        Abar[:, d:, :d] = np.eye(d)
        B = np.zeros((n, 2 * d, m))
        B[:, :d, :] = (np.sqrt(2.0) / eps) * sig
        Q = B @ np.swapaxes(B, -1, -2)
        prop = scipy.linalg.expm(Abar * dt)
        # Van Loan block for the step covariance of (X, I)
        big = np.zeros((n, 4 * d, 4 * d))
        big[:, : 2 * d, : 2 * d] = -Abar
        big[:, : 2 * d, 2 * d :] = Q
        big[:, 2 * d :, 2 * d :] = np.swapaxes(Abar, -1, -2)
        P = scipy.linalg.expm(big * dt)
        cov = np.swapaxes(P[:, 2 * d :, 2 * d :], -1, -2) @ P[:, : 2 * d, 2 * d :]
        cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
        # companion block for the covariance with the shared increment
        aug = np.zeros((n, 2 * d + m, 2 * d + m))
        aug[:, : 2 * d, : 2 * d] = Abar
        aug[:, : 2 * d, 2 * d :] = B
        covw = scipy.linalg.expm(aug * dt)[:, : 2 * d, 2 * d :]
        cond = cov - (covw @ np.swapaxes(covw, -1, -2)) / dt
        L = _chol_psd(0.5 * (cond + np.swapaxes(cond, -1, -2)))
        return prop, covw, L

    def step(self, x, y, dW, gen):
        sys, eps, dt = self.sys, self.eps, self.dt
        d = sys.d
        if self.cache is not None:
            prop, covw, L = self.cache
        else:
            A = np.broadcast_to(
                np.asarray(sys.fast_matrix(y), dtype=float), x.shape[:-1] + (d, d)
            )
            sig = np.broadcast_to(
                np.asarray(sys.sigma(x, y), dtype=float), x.shape[:-1] + (d, sys.m)
            )
            prop, covw, L = self._prepare(A, sig)
        Ay = np.broadcast_to(
            np.asarray(sys.fast_matrix(y), dtype=float), x.shape[:-1] + (d, d)
        )
        cv = sys.c(x, y)
        x_star = eps * np.linalg.solve(Ay, cv[..., None])[..., 0]
        rel = x - x_star
        E = prop[..., :d, :d]
        J = prop[..., d:, :d]
        mean_x = x_star + np.einsum("...ik,...k->...i", E, rel)
        mean_i = dt * x_star + np.einsum("...ik,...k->...i", J, rel)
        mean = np.concatenate([mean_x, mean_i], axis=-1)
        mean = mean + np.einsum("...ik,...k->...i", covw, dW) / dt
        xi = gen.standard_normal(x.shape[:-1] + (2 * d,))
        z = mean + np.einsum("...ik,...k->...i", L, xi)
        x_new = z[..., :d]
        y_new = y + z[..., d:] / eps
        return x_new, y_new


def _pick_scheme(sys: MultiscaleSystem, scheme: str) -> str:
    if scheme != "auto":
        return scheme
    if sys.flags.langevin and sys.fast_matrix is not None:
        return "kinetic_exact"
    if sys.flags.linear_fast and sys.fast_matrix is not None:
        return "strang_exact"
    return "euler"


def _make_stepper(sys, eps, dt, scheme):
    if scheme == "euler":
        return _EulerStepper(sys, eps, dt)
    if scheme == "strang_exact":
        return _StrangExactStepper(sys, eps, dt)
    if scheme == "kinetic_exact":
        if not (sys.flags.langevin and sys.fast_matrix is not None):
            raise ValueError("kinetic_exact requires langevin structure")
        if sys.d == 1 and sys.m == 1:
            return _KineticScalarStepper(sys, eps, dt)
        return _KineticMatrixStepper(sys, eps, dt)
    raise ValueError(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# drivers


def _run_loop(step_fn, x, y, gen, n_steps, dt, refine, m, out_idx):
    n = x.shape[0]
    dim = x.shape[1] + y.shape[1]
    want = {int(k): i for i, k in enumerate(out_idx, start=1)}
    states = np.empty((n, len(out_idx) + 1, dim))
    states[:, 0, :x.shape[1]] = x
    states[:, 0, x.shape[1]:] = y
    failed = np.zeros(n, dtype=bool)
    frozen_x = x.copy()
    frozen_y = y.copy()
    have_failed = False
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k in range(1, n_steps + 1):
            dW = _draw_increments(gen, refine, n, m, dt)
            x_new, y_new = step_fn(x, y, dW, gen)
            # NaN fails the <= comparison, so one pass covers blowup and non-finite
            ok = np.all(np.abs(y_new) <= BLOWUP_NORM, axis=-1)
            if x_new.shape[1]:
                ok &= np.all(np.abs(x_new) <= BLOWUP_NORM, axis=-1)
            newly = ~ok & ~failed
            if newly.any():
                frozen_x[newly] = x[newly]
                frozen_y[newly] = y[newly]
                failed |= newly
                have_failed = True
            x, y = x_new, y_new
            if have_failed:
                x[failed] = frozen_x[failed]
                y[failed] = frozen_y[failed]
            pos = want.get(k)
            if pos is not None:
                states[:, pos, : x.shape[1]] = x
                states[:, pos, x.shape[1]:] = y
    return states, failed


def integrate_multiscale(
    sys: MultiscaleSystem,
    eps: float,
    z0,
    t_grid,
    n_paths: int,
    stream: RngStream,
    dt: float | None = None,
    scheme: str = "auto",
    noise_refine: int = 1,
    allow_coarse_dt: bool = False,
) -> TrajectoryEnsemble:
    """Simulate the pair process from z0 = (x0, y0) on the output grid.

    z0 may be a single state of length d + vartheta (shared by all paths)
    or an array (n_paths, d + vartheta).
    """
    eps = float(eps)
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    if noise_refine < 1:
        raise ValueError("noise_refine must be >= 1")
    scheme = _pick_scheme(sys, scheme)
    t_grid, dt, n_steps, out_idx = _normalize_grid(t_grid, dt)
    if scheme == "euler" and not allow_coarse_dt and dt > eps**2 / EULER_CFL + 1e-15:
        raise ValueError(
            f"euler scheme needs dt <= eps^2/{EULER_CFL:g} "
            f"(dt={dt:g}, eps={eps:g}); pass allow_coarse_dt=True to override"
        )
    z0 = np.asarray(z0, dtype=float)
    dim = sys.state_dim
    if z0.ndim == 1:
        z0 = np.broadcast_to(z0, (n_paths, dim)).copy()
    if z0.shape != (n_paths, dim):
        raise ValueError(f"z0 must have shape ({dim},) or ({n_paths}, {dim})")
    x = z0[:, : sys.d].copy()
    y = z0[:, sys.d:].copy()
    stepper = _make_stepper(sys, eps, dt, scheme)
    gen = stream.generator()
    states, failed = _run_loop(
        stepper.step, x, y, gen, n_steps, dt, noise_refine, sys.m, out_idx
    )
    times = np.concatenate(([0.0], t_grid))
    meta = {
        "system": sys.name,
        "scheme": scheme,
        "dt": dt,
        "noise_refine": noise_refine,
        "seed": stream.seed,
        "stream": stream.stream,
        "n_failed": int(np.sum(failed)),
    }
    return TrajectoryEnsemble(
        times=times,
        states=states,
        kind="multiscale",
        dims=(sys.d, sys.vartheta),
        eps=eps,
        failed=failed,
        meta=meta,
    )


def integrate_multiscale_ladder(
    sys: MultiscaleSystem,
    eps_grid,
    dts,
    refines,
    z0,
    t_grid,
    n_paths: int,
    stream: RngStream,
    scheme: str = "auto",
    z0_rows=None,
    allow_coarse_dt: bool = False,
) -> list[TrajectoryEnsemble]:
    """One ensemble per eps, all rows driven by the same fine Brownian path.

    The fine increments (step dts[i] / refines[i], equal for all i) are
    drawn once from `stream`; row i consumes them summed in blocks of
    refines[i].  Auxiliary scheme noise (conditional fast-block draws)
    comes from stream.child(11 + i) so the shared path stays untouched.
    Every output time must be an integer multiple of every dts[i].
    z0_rows, when given, holds one start state per eps and overrides z0.
    """
    eps_grid = [float(e) for e in eps_grid]
    dts = [float(d) for d in dts]
    refines = [int(r) for r in refines]
    n_rows = len(eps_grid)
    if not (len(dts) == len(refines) == n_rows >= 1):
        raise ValueError("eps_grid, dts, refines must have equal nonzero length")
    dt_fine = dts[-1] / refines[-1]
    for e, d, r in zip(eps_grid, dts, refines):
        if not 0 < e <= 1:
            raise ValueError("eps must lie in (0, 1]")
        if r < 1 or abs(d / r - dt_fine) > 1e-9 * dt_fine:
            raise ValueError("dts[i]/refines[i] must equal a common fine step")
    scheme = _pick_scheme(sys, scheme)
    t_grid, dt_fine, n_fine, out_idx = _normalize_grid(t_grid, dt_fine)
    for e, d, r in zip(eps_grid, dts, refines):
        if scheme == "euler" and not allow_coarse_dt and d > e**2 / EULER_CFL + 1e-15:
            raise ValueError(
                f"euler scheme needs dt <= eps^2/{EULER_CFL:g}; "
                "pass allow_coarse_dt=True to override"
            )
        if np.any(out_idx % r):
            raise ValueError("output times must be multiples of every dts[i]")

    dim = sys.state_dim

    def _starts(z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = np.broadcast_to(z, (n_paths, dim)).copy()
        if z.shape != (n_paths, dim):
            raise ValueError(f"z0 must have shape ({dim},) or ({n_paths}, {dim})")
        return z

    if z0_rows is not None:
        if len(z0_rows) != n_rows:
            raise ValueError("z0_rows must hold one start state per eps")
        starts = [_starts(z) for z in z0_rows]
    else:
        starts = [_starts(z0)] * n_rows
    want = {int(k): i for i, k in enumerate(out_idx, start=1)}

    class _Row:
        def __init__(self, eps, dt, refine, aux, z0):
            self.eps = eps
            self.dt = dt
            self.refine = refine
            self.step = _make_stepper(sys, eps, dt, scheme).step
            self.gen = aux.generator()
            self.x = z0[:, : sys.d].copy()
            self.y = z0[:, sys.d:].copy()
            self.acc = None if refine == 1 else np.zeros((n_paths, sys.m))
            self.failed = np.zeros(n_paths, dtype=bool)
            self.frozen_x = self.x.copy()
            self.frozen_y = self.y.copy()
            self.have_failed = False
            self.states = np.empty((n_paths, len(out_idx) + 1, dim))
            self.states[:, 0, : sys.d] = self.x
            self.states[:, 0, sys.d:] = self.y

        def advance(self, j, dW_fine):
            if self.acc is None:
                dW = dW_fine
            else:
                self.acc += dW_fine
                if j % self.refine:
                    return
                dW = self.acc
                self.acc = np.zeros_like(dW)
            x_new, y_new = self.step(self.x, self.y, dW, self.gen)
            ok = np.all(np.abs(y_new) <= BLOWUP_NORM, axis=-1)
            if x_new.shape[1]:
                ok &= np.all(np.abs(x_new) <= BLOWUP_NORM, axis=-1)
            newly = ~ok & ~self.failed
            if newly.any():
                self.frozen_x[newly] = self.x[newly]
                self.frozen_y[newly] = self.y[newly]
                self.failed |= newly
                self.have_failed = True
            self.x, self.y = x_new, y_new
            if self.have_failed:
                self.x[self.failed] = self.frozen_x[self.failed]
                self.y[self.failed] = self.frozen_y[self.failed]
            pos = want.get(j)
            if pos is not None:
                self.states[:, pos, : sys.d] = self.x
                self.states[:, pos, sys.d:] = self.y

    rows = [
        _Row(e, d, r, stream.child(11 + i), starts[i])
        for i, (e, d, r) in enumerate(zip(eps_grid, dts, refines))
    ]
    gen_w = stream.generator()
    sqrt_dtf = np.sqrt(dt_fine)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for j in range(1, n_fine + 1):
            dW_fine = sqrt_dtf * gen_w.standard_normal((n_paths, sys.m))
            for row in rows:
                row.advance(j, dW_fine)

    times = np.concatenate(([0.0], t_grid))
    out = []
    for row in rows:
        meta = {
            "system": sys.name,
            "scheme": scheme,
            "dt": row.dt,
            "noise_refine": row.refine,
            "seed": stream.seed,
            "stream": stream.stream,
            "shared_ladder": True,
            "n_failed": int(np.sum(row.failed)),
        }
        out.append(
            TrajectoryEnsemble(
                times=times,
                states=row.states,
                kind="multiscale",
                dims=(sys.d, sys.vartheta),
                eps=row.eps,
                failed=row.failed,
                meta=meta,
            )
        )
    return out


def integrate_homogenized(
    F_eval,
    sqrtG_eval,
    y0,
    t_grid,
    n_paths: int,
    stream: RngStream,
    dt: float | None = None,
) -> TrajectoryEnsemble:
    """Euler-Maruyama for dY = F(Y) dt + sqrt(2) S(Y) dW with S = G^(1/2).

    F_eval maps (n, vartheta) -> (n, vartheta); sqrtG_eval maps
    (n, vartheta) -> (n, vartheta, vartheta) or is a constant matrix.
    """
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    vt = y0.shape[-1]
    if y0.ndim == 1:
        y = np.broadcast_to(y0, (n_paths, vt)).copy()
    elif y0.shape == (n_paths, vt):
        y = y0.copy()
    else:
        raise ValueError("y0 must be a state or an (n_paths, vartheta) array")
    t_grid, dt, n_steps, out_idx = _normalize_grid(t_grid, dt)
    if callable(sqrtG_eval):
        sig_fn = sqrtG_eval
    else:
        const = np.asarray(sqrtG_eval, dtype=float)
        if const.shape != (vt, vt):
            raise ValueError("constant sqrtG must be (vartheta, vartheta)")
        sig_fn = lambda yy: np.broadcast_to(const, yy.shape[:-1] + (vt, vt))

    def step(xdummy, y, dW, gen):
        drift = F_eval(y)
        noise = np.einsum("...ik,...k->...i", sig_fn(y), dW)
        return xdummy, y + drift * dt + np.sqrt(2.0) * noise

    gen = stream.generator()
    x = np.zeros((n_paths, 0))
    states, failed = _run_loop(step, x, y, gen, n_steps, dt, 1, vt, out_idx)
    times = np.concatenate(([0.0], t_grid))
    meta = {
        "scheme": "euler_homogenized",
        "dt": dt,
        "seed": stream.seed,
        "stream": stream.stream,
        "n_failed": int(np.sum(failed)),
    }
    return TrajectoryEnsemble(
        times=times,
        states=states,
        kind="homogenized",
        dims=(0, vt),
        failed=failed,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# estimation


def _observable_values(ens: TrajectoryEnsemble, phi, state):
    if isinstance(phi, TestObservable):
        if ens.kind == "homogenized":
            cm = phi.conditional_mean
            if cm is None:
                raise ValueError(
                    f"observable {phi.name!r} has no slow-variable reduction"
                )
            return np.asarray(cm(state), dtype=float)
        x, y = ens.split(state)
        return np.asarray(phi(x, y), dtype=float)
    if ens.kind == "homogenized":
        return np.asarray(phi(state), dtype=float)
    x, y = ens.split(state)
    return np.asarray(phi(x, y), dtype=float)


def estimate_expectation(ens: TrajectoryEnsemble, phi, t: float):
    """Monte Carlo mean and standard error of phi at the grid time nearest t.

    Failed paths are excluded.  phi may be a TestObservable (evaluated on
    (x, y) for multiscale ensembles and through its slow reduction for
    homogenized ones) or a bare callable on the stored state block.
    """
    idx = ens.time_index(t)
    state = ens.states[:, idx, :]
    vals = _observable_values(ens, phi, state)
    vals = vals[~ens.failed]
    n = vals.shape[0]
    if n < 2:
        raise ValueError("need at least two surviving paths")
    mean = float(np.mean(vals))
    stderr = float(np.std(vals, ddof=1) / np.sqrt(n))
    return mean, stderr


# ---------------------------------------------------------------------------
# persistence


_FORMAT = "homoscale-ensemble-1"


def save_ensemble(ens: TrajectoryEnsemble, basepath: str) -> None:
    """Write basepath.bin (packed arrays) and basepath.json (layout + meta).

    Arrays are little-endian float64 in C order; the sidecar records the
    byte offset and shape of each block.
    """
    blocks = [
        ("times", np.ascontiguousarray(ens.times, dtype="<f8")),
        ("states", np.ascontiguousarray(ens.states, dtype="<f8")),
        ("failed", np.ascontiguousarray(ens.failed, dtype="u1")),
    ]
    layout = {}
    offset = 0
    with open(basepath + ".bin", "wb") as fh:
        for name, arr in blocks:
            fh.write(arr.tobytes(order="C"))
            layout[name] = {
                "offset": offset,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
            }
            offset += arr.nbytes
    sidecar = {
        "format": _FORMAT,
        "kind": ens.kind,
        "dims": list(ens.dims),
        "eps": ens.eps,
        "arrays": layout,
        "meta": ens.meta,
    }
    with open(basepath + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_ensemble(basepath: str) -> TrajectoryEnsemble:
    with open(basepath + ".json") as fh:
        sidecar = json.load(fh)
    if sidecar.get("format") != _FORMAT:
        raise ValueError(f"unrecognized ensemble format in {basepath}.json")
    raw = np.fromfile(basepath + ".bin", dtype="u1")
    arrays = {}
    for name, spec in sidecar["arrays"].items():
        dt = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) * dt.itemsize
        start = spec["offset"]
        arrays[name] = raw[start : start + count].view(dt).reshape(shape)
    return TrajectoryEnsemble(
        times=np.asarray(arrays["times"], dtype=float),
        states=np.asarray(arrays["states"], dtype=float),
        kind=sidecar["kind"],
        dims=tuple(sidecar["dims"]),
        eps=sidecar["eps"],
        failed=arrays["failed"].astype(bool),
        meta=sidecar.get("meta", {}),
    )


def export_csv(ens: TrajectoryEnsemble, path: str, max_paths: int | None = None) -> None:
    """Tidy CSV: one row per (path, time) with state columns s0..s{dim-1}."""
    from .serialize import fmt_float

    dim = ens.states.shape[2]
    n = ens.n_paths if max_paths is None else min(max_paths, ens.n_paths)
    header = "path,time,failed," + ",".join(f"s{i}" for i in range(dim))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for p in range(n):
            flag = int(ens.failed[p])
            for ti, t in enumerate(ens.times):
                row = ens.states[p, ti]
                fh.write(
                    f"{p},{fmt_float(t)},{flag},"
                    + ",".join(fmt_float(v) for v in row)
                    + "\n"
                )
