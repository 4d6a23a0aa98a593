"""Measuring the gap between multiscale ensembles and their diffusion limit.

The central object is the error surface

    E(eps, t) = | E phi(Z_t^eps) - E phibar(Ybar_t) |

estimated by Monte Carlo on both sides with independent noise: Brownian
increments are shared across the eps grid (nested refinement of one fine
grid) so that error curves at different eps are strongly correlated and
their ordering is resolvable at moderate path counts, while the
homogenized side runs on its own stream.  The standard error of each cell
is the delta-method combination sqrt(se_ms^2 + se_hom^2) of the two
sample-mean errors.

The conditional mean phibar is resolved in order of preference: declared
closed form, slow-only observables as-is, and otherwise Gaussian inner
sampling under the frozen equilibrium (linear fast drift only).

fit_rate turns sup-over-t errors into a log-log slope with a residual
bootstrap confidence interval; boundary_layer_fit extracts the O(eps^2)
initial-layer decay rate of fast observables; stationary_gap and
commutativity_check compare long-time averages in the two possible orders
of the limits t -> infinity and eps -> 0.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    integrate_homogenized,
    integrate_multiscale,
    integrate_multiscale_ladder,
)
from .lyapunov import lyapunov_batch
from .rng import RngStream

__all__ = [
    "RateFit",
    "ConvergenceReport",
    "refine_ladder",
    "joint_law_error",
    "fit_rate",
    "BoundaryLayerFit",
    "boundary_layer_fit",
    "StationaryGap",
    "stationary_gap",
    "CommutativityCheck",
    "commutativity_check",
]

_INNER_DEFAULT = 64
_USABLE_FACTOR = 2.0


def thread_map(fn, n: int):
    """Map fn over range(n), parallel across HOMOSCALE_THREADS workers.

    Results come back indexed, so the merge is deterministic regardless of
    completion order; each job must use its own pre-assigned RNG stream.
    """
    try:
        workers = int(os.environ.get("HOMOSCALE_THREADS", "1"))
    except ValueError:
        workers = 1
    workers = max(1, min(workers, n))
    if workers == 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, range(n)))


# ---------------------------------------------------------------------------
# report containers


@dataclass(frozen=True)
class RateFit:
    """Log-log slope of sup error against eps with a bootstrap CI."""

    rate: float
    intercept: float
    ci_lo: float
    ci_hi: float
    n_used: int
    used: np.ndarray
    n_boot: int

    def to_dict(self) -> dict:
        return {
            "rate": self.rate,
            "intercept": self.intercept,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "n_used": self.n_used,
            "n_boot": self.n_boot,
        }


@dataclass(frozen=True)
class ConvergenceReport:
    """Error surface over (eps, t) plus the fitted decay rate."""

    eps_grid: np.ndarray
    t_grid: np.ndarray
    errors: np.ndarray
    stderrs: np.ndarray
    rate: RateFit | None = None
    meta: dict = field(default_factory=dict)

    @property
    def sup_errors(self) -> np.ndarray:
        return np.max(self.errors, axis=1)

    def to_rows(self):
        rows = []
        for i, eps in enumerate(self.eps_grid):
            for j, t in enumerate(self.t_grid):
                rows.append(
                    (float(eps), float(t), float(self.errors[i, j]),
                     float(self.stderrs[i, j]))
                )
        return rows

    def sup_rows(self):
        """(log10 eps, log10 sup error) pairs for the rate plot."""
        sup = self.sup_errors
        return [
            (float(np.log10(e)), float(np.log10(max(s, 1e-300))))
            for e, s in zip(self.eps_grid, sup)
        ]

    def to_dict(self) -> dict:
        out = {
            "eps_grid": [float(e) for e in self.eps_grid],
            "sup_errors": [float(s) for s in self.sup_errors],
            "meta": dict(self.meta),
        }
        if self.rate is not None:
            out["rate"] = self.rate.to_dict()
        return out


# ---------------------------------------------------------------------------
# shared-noise ladder


def refine_ladder(eps_grid, t_grid, factor: float = 20.0):
    """Per-eps step sizes tied to one common fine grid.

    Returns (dts, refines) with dts[i] = refines[i] * dt_fine, every dt
    dividing every output time, and dts[i] <= eps_i^2 / factor.  Requires
    the output times to be integer multiples of one common unit step.
    """
    eps_grid = np.asarray(eps_grid, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(eps_grid) >= 0):
        raise ValueError("eps grid must be strictly decreasing")
    gaps = np.diff(np.concatenate([[0.0], t_grid]))
    if float(np.min(gaps)) <= 0:
        raise ValueError("output times must be strictly increasing")
    # unit step: largest g with every output time an integer multiple of g
    g = None
    for k in range(1, 1001):
        cand = float(np.min(gaps)) / k
        mult = t_grid / cand
        if np.max(np.abs(mult - np.round(mult))) <= 1e-9 * k:
            g = cand
            break
    if g is None:
        raise ValueError("output times do not share a common unit step")
    eps_min = float(np.min(eps_grid))
    m_fine = int(np.ceil(g * factor / eps_min**2 - 1e-12))
    divisors = [k for k in range(1, m_fine + 1) if m_fine % k == 0]
    dts, refines = [], []
    for eps in eps_grid:
        target = (float(eps) / eps_min) ** 2
        cands = [k for k in divisors if k <= target + 1e-9]
        r = max(cands)
        while g * r / m_fine > float(eps) ** 2 / factor + 1e-15 and r > 1:
            cands.remove(r)
            r = max(cands)
        refines.append(int(r))
        dts.append(g * r / m_fine)
    return dts, refines


# ---------------------------------------------------------------------------
# conditional means


def _conditional_mean_values(sys, phi, y, stream, n_inner=_INNER_DEFAULT):
    """mu_y(phi) over an array of slow states y of shape (..., vartheta)."""
    try:
        return np.asarray(phi.conditional_mean(y), dtype=float)
    except (AttributeError, ValueError):
        pass
    if not getattr(sys.flags, "linear_fast", False) or sys.fast_matrix is None:
        raise ValueError(
            f"observable {getattr(phi, 'name', phi)!r} needs a closed-form "
            "conditional mean unless the fast drift is linear"
        )
    y = np.asarray(y, dtype=float)
    batch = y.shape[:-1]
    flat = y.reshape(-1, y.shape[-1])
    A = np.asarray(sys.fast_matrix(flat), dtype=float)
    A = np.broadcast_to(A, (flat.shape[0], sys.d, sys.d))
    sig = np.asarray(sys.sigma(np.zeros((flat.shape[0], sys.d)), flat), dtype=float)
    M = sig @ np.swapaxes(sig, -1, -2)
    cov = lyapunov_batch(A, M)
    w, V = np.linalg.eigh(cov)
    L = V * np.sqrt(np.clip(w, 0.0, None))[..., None, :]
    xi = stream.generator().standard_normal((n_inner, sys.d))
    out = np.empty(flat.shape[0])
    step = max(1, 4_000_000 // max(n_inner * sys.d, 1))
    for lo in range(0, flat.shape[0], step):
        xs = np.einsum("nik,sk->nsi", L[lo : lo + step], xi)
        ys = np.broadcast_to(
            flat[lo : lo + step, None, :], xs.shape[:-1] + (y.shape[-1],)
        )
        out[lo : lo + step] = np.mean(phi(xs, ys), axis=-1)
    return out.reshape(batch)


def _ensemble_mean(values, failed):
    vals = values[~failed]
    n = vals.shape[0]
    if n < 2:
        raise RuntimeError("fewer than two surviving paths")
    return np.mean(vals, axis=0), np.std(vals, axis=0, ddof=1) / np.sqrt(n)


# ---------------------------------------------------------------------------
# the error surface


def joint_law_error(
    sys,
    phi,
    eps_grid,
    t_grid,
    n_paths: int,
    stream: RngStream,
    z0=None,
    evaluators=None,
    n_hom: int | None = None,
    dt_factor: float = 20.0,
    scheme: str = "euler",
    hom_dt: float | None = None,
    fit: bool = True,
) -> ConvergenceReport:
    """Weak-error surface of phi between the pair process and its limit.

    The multiscale ensembles share Brownian increments across the eps grid
    (stream as given); the homogenized reference runs independently on the
    next stream index with the same master seed.
    """
    eps_grid = np.asarray(eps_grid, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    if z0 is None:
        z0 = np.zeros(sys.state_dim)
    z0 = np.asarray(z0, dtype=float)
    y0 = z0[sys.d :]
    if evaluators is None:
        from .effective import effective_evaluators

        evaluators = effective_evaluators(sys, RngStream(stream.seed, 2))
    F_eval, sqrtG_eval = evaluators

    n_hom = n_paths if n_hom is None else int(n_hom)
    if hom_dt is None:
        hom_dt = min(0.005, float(np.min(np.diff(np.concatenate([[0.0], t_grid])))))
    hom = integrate_homogenized(
        F_eval, sqrtG_eval, y0, t_grid, n_hom, RngStream(stream.seed, 1), dt=hom_dt
    )
    eq_stream = RngStream(stream.seed, 2)
    hom_vals = _conditional_mean_values(sys, phi, hom.states[:, 1:, :], eq_stream)
    hom_mean, hom_se = _ensemble_mean(hom_vals, hom.failed)

    dts, refines = refine_ladder(eps_grid, t_grid, dt_factor)
    ensembles = integrate_multiscale_ladder(
        sys, eps_grid, dts, refines, z0, t_grid, n_paths, stream, scheme=scheme
    )
    errors = np.zeros((eps_grid.size, t_grid.size))
    stderrs = np.zeros_like(errors)
    for i, ens in enumerate(ensembles):
        x, y = ens.split()
        vals = np.asarray(phi(x[:, 1:, :], y[:, 1:, :]), dtype=float)
        mean, se = _ensemble_mean(vals, ens.failed)
        errors[i] = np.abs(mean - hom_mean)
        stderrs[i] = np.sqrt(se**2 + hom_se**2)

    rate = None
    if fit:
        sup_idx = np.argmax(errors, axis=1)
        rows = np.arange(eps_grid.size)
        rate = fit_rate(
            eps_grid,
            errors[rows, sup_idx],
            stderrs[rows, sup_idx],
            RngStream(stream.seed, 3),
        )
    return ConvergenceReport(
        eps_grid=eps_grid,
        t_grid=t_grid,
        errors=errors,
        stderrs=stderrs,
        rate=rate,
        meta={
            "system": sys.name,
            "observable": getattr(phi, "name", "callable"),
            "n_paths": n_paths,
            "n_hom": n_hom,
            "seed": stream.seed,
            "scheme": scheme,
            "dt_factor": dt_factor,
            "hom_dt": hom_dt,
            "refines": refines,
        },
    )


def fit_rate(
    eps_grid,
    sup_errors,
    sup_stderrs,
    stream: RngStream,
    n_boot: int = 200,
) -> RateFit:
    """Least-squares slope of log error against log eps.

    Points are usable when the error exceeds twice its standard error;
    fewer than three usable points raises (insufficient resolution).  The
    confidence interval is the 2.5/97.5 percentile band of slopes refit to
    two hundred residual-bootstrap resamples.
    """
    eps_grid = np.asarray(eps_grid, dtype=float)
    sup_errors = np.asarray(sup_errors, dtype=float)
    sup_stderrs = np.asarray(sup_stderrs, dtype=float)
    used = (sup_errors > _USABLE_FACTOR * sup_stderrs) & (sup_errors > 0)
    if int(np.sum(used)) < 3:
        raise ValueError(
            f"insufficient resolved points for a rate fit "
            f"({int(np.sum(used))} of {eps_grid.size} usable)"
        )
    lx = np.log(eps_grid[used])
    ly = np.log(sup_errors[used])
    X = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, *_ = np.linalg.lstsq(X, ly, rcond=None)
    fitted = X @ coef
    resid = ly - fitted
    gen = stream.generator()
    slopes = np.empty(n_boot)
    for b in range(n_boot):
        sample = fitted + resid[gen.integers(0, resid.size, size=resid.size)]
        cb, *_ = np.linalg.lstsq(X, sample, rcond=None)
        slopes[b] = cb[0]
    lo, hi = np.percentile(slopes, [2.5, 97.5])
    return RateFit(
        rate=float(coef[0]),
        intercept=float(coef[1]),
        ci_lo=float(lo),
        ci_hi=float(hi),
        n_used=int(np.sum(used)),
        used=used,
        n_boot=n_boot,
    )


# ---------------------------------------------------------------------------
# initial layer


@dataclass(frozen=True)
class BoundaryLayerFit:
    """Exponential decay rate of the fast observable's initial layer."""

    status: str
    kappa: float
    ci_lo: float
    ci_hi: float
    eps: float
    t_grid: np.ndarray
    log_gap: np.ndarray
    reference: float
    meta: dict = field(default_factory=dict)

    def layer_rows(self):
        """(t / eps^2, log gap) pairs for the layer plot."""
        s = self.t_grid / self.eps**2
        return [
            (float(a), float(b))
            for a, b in zip(s, self.log_gap)
            if np.isfinite(b)
        ]


def boundary_layer_fit(
    sys,
    phi,
    eps: float,
    t_grid,
    n_paths: int,
    stream: RngStream,
    z0=None,
    dt_factor: float = 20.0,
    scheme: str = "auto",
) -> BoundaryLayerFit:
    """Fit log |E phi(X_t) - mu_{y0}(phi)| against -kappa t / eps^2.

    The reference is the frozen-equilibrium mean at the initial slow
    state, which the slow variable has no time to leave on the layer's
    O(eps^2) timescale.  Unresolved outcomes (constant observable, layer
    amplitude within noise, too few resolved times) are reported in
    status, not raised.
    """
    from .frozen import frozen_equilibrium

    eps = float(eps)
    t_grid = np.asarray(t_grid, dtype=float)
    if z0 is None:
        z0 = np.zeros(sys.state_dim)
    z0 = np.asarray(z0, dtype=float)
    y0 = z0[sys.d :]
    eq = frozen_equilibrium(sys, y0, stream=RngStream(stream.seed, 2))
    ref = float(eq.expect(lambda x: np.asarray(phi(x, np.broadcast_to(
        y0, x.shape[:-1] + (y0.size,))), dtype=float)))

    g = float(np.min(np.diff(np.concatenate([[0.0], t_grid]))))
    dt = g / int(np.ceil(g / (eps**2 / dt_factor)))
    ens = integrate_multiscale(
        sys, eps, z0, t_grid, n_paths, stream, dt=dt, scheme=scheme
    )
    x, y = ens.split()
    vals = np.asarray(phi(x[:, 1:, :], y[:, 1:, :]), dtype=float)
    mean, se = _ensemble_mean(vals, ens.failed)
    spread = float(np.max(np.std(vals, axis=0)))

    gap = np.abs(mean - ref)
    log_gap = np.where(gap > 0, np.log(np.maximum(gap, 1e-300)), -np.inf)
    base = dict(
        eps=eps, t_grid=t_grid.copy(), log_gap=log_gap, reference=ref,
        meta={"n_paths": n_paths, "dt": dt},
    )
    if spread < 1e-12:
        return BoundaryLayerFit(
            status="unresolved: observable is constant on paths",
            kappa=np.nan, ci_lo=np.nan, ci_hi=np.nan, **base)
    resolved = gap > 4.0 * se
    if not np.any(resolved) or float(np.max(gap)) <= 4.0 * float(np.max(se)):
        return BoundaryLayerFit(
            status="unresolved: layer amplitude within noise",
            kappa=np.nan, ci_lo=np.nan, ci_hi=np.nan, **base)
    if int(np.sum(resolved)) < 3:
        return BoundaryLayerFit(
            status="unresolved: time grid too coarse for the layer",
            kappa=np.nan, ci_lo=np.nan, ci_hi=np.nan, **base)
    s = t_grid[resolved] / eps**2
    ly = log_gap[resolved]
    X = np.stack([s, np.ones_like(s)], axis=1)
    coef, *_ = np.linalg.lstsq(X, ly, rcond=None)
    resid = ly - X @ coef
    dof = max(s.size - 2, 1)
    sxx = float(np.sum((s - np.mean(s)) ** 2))
    slope_se = float(np.sqrt(np.sum(resid**2) / dof / max(sxx, 1e-300)))
    kappa = -float(coef[0])
    return BoundaryLayerFit(
        status="ok",
        kappa=kappa,
        ci_lo=kappa - 2.0 * slope_se,
        ci_hi=kappa + 2.0 * slope_se,
        **base,
    )


# ---------------------------------------------------------------------------
# stationary averages


@dataclass(frozen=True)
class StationaryGap:
    """Long-run time-space average against the homogenized one."""

    value: float
    stderr: float
    reference: float
    ref_stderr: float
    meta: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.value - self.reference

    @property
    def gap_stderr(self) -> float:
        return float(np.sqrt(self.stderr**2 + self.ref_stderr**2))


def _window_average(values, failed, keep):
    """Per-path time averages over the kept window; batch means over paths."""
    vals = values[~failed][:, keep]
    per_path = np.mean(vals, axis=1)
    n = per_path.size
    mean = float(np.mean(per_path))
    se = float(np.std(per_path, ddof=1) / np.sqrt(n))
    half = vals.shape[1] // 2
    a = np.mean(vals[:, :half])
    b = np.mean(vals[:, half:])
    drift = abs(float(a - b))
    drift_se = float(
        np.sqrt(
            np.var(np.mean(vals[:, :half], axis=1), ddof=1) / n
            + np.var(np.mean(vals[:, half:], axis=1), ddof=1) / n
        )
    )
    return mean, se, drift, drift_se


def stationary_gap(
    sys,
    phi,
    eps: float,
    T: float,
    n_paths: int,
    stream: RngStream,
    z0=None,
    burn: float = 0.5,
    n_times: int = 64,
    evaluators=None,
    dt: float | None = None,
    hom_dt: float | None = None,
) -> StationaryGap:
    """Time-space average of phi over [burn T, T] on both sides of the limit.

    Raises if either window fails the first-half/second-half stationarity
    check at four combined standard errors.
    """
    eps = float(eps)
    T = float(T)
    t_grid = np.linspace(T / n_times, T, n_times)
    if z0 is None:
        z0 = np.zeros(sys.state_dim)
    z0 = np.asarray(z0, dtype=float)
    if evaluators is None:
        from .effective import effective_evaluators

        evaluators = effective_evaluators(sys, RngStream(stream.seed, 2))
    F_eval, sqrtG_eval = evaluators
    if dt is None:
        g = T / n_times
        dt = g / int(np.ceil(g / (eps**2 / 20.0)))
    ens = integrate_multiscale(
        sys, eps, z0, t_grid, n_paths, stream, dt=dt, scheme="auto"
    )
    x, y = ens.split()
    vals = np.asarray(phi(x[:, 1:, :], y[:, 1:, :]), dtype=float)
    keep = t_grid >= burn * T
    mean, se, drift, drift_se = _window_average(vals, ens.failed, keep)
    if drift > 4.0 * max(drift_se, 1e-300):
        raise RuntimeError(
            f"multiscale window not stationary: half-averages differ by "
            f"{drift:.3e} (4 SE = {4 * drift_se:.3e}); increase T or burn"
        )
    if hom_dt is None:
        hom_dt = min(0.005, T / n_times)
    hom = integrate_homogenized(
        F_eval, sqrtG_eval, z0[sys.d :], t_grid, n_paths,
        RngStream(stream.seed, 1), dt=hom_dt,
    )
    hvals = _conditional_mean_values(
        sys, phi, hom.states[:, 1:, :], RngStream(stream.seed, 2)
    )
    rmean, rse, rdrift, rdrift_se = _window_average(hvals, hom.failed, keep)
    if rdrift > 4.0 * max(rdrift_se, 1e-300):
        raise RuntimeError(
            f"homogenized window not stationary: half-averages differ by "
            f"{rdrift:.3e} (4 SE = {4 * rdrift_se:.3e}); increase T or burn"
        )
    return StationaryGap(
        value=mean,
        stderr=se,
        reference=rmean,
        ref_stderr=rse,
        meta={
            "eps": eps, "T": T, "burn": burn, "n_paths": n_paths,
            "dt": dt, "hom_dt": hom_dt, "seed": stream.seed,
        },
    )


@dataclass(frozen=True)
class CommutativityCheck:
    """eps -> 0 extrapolation of long-time averages vs the homogenized one."""

    extrapolated: float
    extrapolated_se: float
    stationary: float
    stationary_se: float
    per_eps: tuple
    meta: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.extrapolated - self.stationary

    @property
    def gap_stderr(self) -> float:
        return float(np.sqrt(self.extrapolated_se**2 + self.stationary_se**2))


def commutativity_check(
    sys,
    phi,
    eps_grid,
    T_long: float,
    n_paths: int,
    stream: RngStream,
    z0=None,
    burn: float = 0.5,
    n_times: int = 64,
    evaluators=None,
) -> CommutativityCheck:
    """Compare the two iterated limits of E phi(Z_t^eps).

    Route A holds eps fixed, time-averages over the stationary window, and
    extrapolates the averages linearly in eps to zero (weighted least
    squares).  Route B time-averages phibar under the homogenized flow.
    """
    eps_grid = np.asarray(eps_grid, dtype=float)
    T = float(T_long)
    t_grid = np.linspace(T / n_times, T, n_times)
    if z0 is None:
        z0 = np.zeros(sys.state_dim)
    z0 = np.asarray(z0, dtype=float)
    if evaluators is None:
        from .effective import effective_evaluators

        evaluators = effective_evaluators(sys, RngStream(stream.seed, 2))
    F_eval, sqrtG_eval = evaluators
    keep = t_grid >= burn * T

    rows = []
    for eps in eps_grid:
        dtg = T / n_times
        dt = dtg / int(np.ceil(dtg / (float(eps) ** 2 / 20.0)))
        ens = integrate_multiscale(
            sys, float(eps), z0, t_grid, n_paths, stream, dt=dt, scheme="auto"
        )
        x, y = ens.split()
        vals = np.asarray(phi(x[:, 1:, :], y[:, 1:, :]), dtype=float)
        mean, se, drift, drift_se = _window_average(vals, ens.failed, keep)
        rows.append({"eps": float(eps), "mean": mean, "stderr": se,
                     "half_drift": drift, "half_drift_se": drift_se})

    w = np.array([1.0 / max(r["stderr"], 1e-300) ** 2 for r in rows])
    e = np.array([r["eps"] for r in rows])
    m = np.array([r["mean"] for r in rows])
    X = np.stack([np.ones_like(e), e], axis=1)
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    coef = cov @ (XtW @ m)
    a_hat = float(coef[0])
    a_se = float(np.sqrt(cov[0, 0]))

    hom_dt = min(0.005, T / n_times)
    hom = integrate_homogenized(
        F_eval, sqrtG_eval, z0[sys.d :], t_grid, n_paths,
        RngStream(stream.seed, 1), dt=hom_dt,
    )
    hvals = _conditional_mean_values(
        sys, phi, hom.states[:, 1:, :], RngStream(stream.seed, 2)
    )
    rmean, rse, _, _ = _window_average(hvals, hom.failed, keep)

    return CommutativityCheck(
        extrapolated=a_hat,
        extrapolated_se=a_se,
        stationary=rmean,
        stationary_se=rse,
        per_eps=tuple(rows),
        meta={"T": T, "burn": burn, "n_paths": n_paths, "seed": stream.seed},
    )
