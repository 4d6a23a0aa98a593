"""Kinetic Langevin systems and their overdamped-limit thermodynamics.

The second-order dynamics with state-dependent friction A(y),

    dX = -eps^-2 A(Y) X dt - eps^-1 grad U(Y) dt + sqrt(2) eps^-1 sigma(Y) dW
    dY = eps^-1 X dt,

is the fast-slow pair with b = -A(y) x, c = -grad U, H = x and a silent
slow row (F = G = 0); X is the scaled velocity and the natural initial
datum is (X0, Y0) = (eps v, y0).  The limit is the overdamped SDE with
the closed-form coefficients of ``effective.effective_sk``, including the
noise-induced drift when A varies with y.

Thermodynamic observables compared against their local-equilibrium
references:

* energy        E[ 1/2 |X|^2 + U(Y) ]     vs  E[ 1/2 tr Sigma(Ybar) + U(Ybar) ]
* entropy rate  E[ <A(Y) X, X> ]           vs  E[ tr sigma sigma*(Ybar) ]

where Sigma(y) solves the frozen Lyapunov equation and the second pair is
linked by the exact trace identity tr(A Sigma) = tr(sigma sigma*).  The
Gaussian free-energy correction 1/2 (tr Sigma - log det Sigma - d) is the
Kullback-Leibler divergence of N(0, Sigma) from N(0, I).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import TrajectoryEnsemble, integrate_multiscale, integrate_homogenized
from .lyapunov import lyapunov_batch, solve_lyapunov
from .rng import RngStream
from .systems import (
    CoefficientField,
    MultiscaleSystem,
    SystemFlags,
    probe_grid,
    validate_system,
    zero_field,
)

__all__ = [
    "LangevinSystem",
    "sk_simulate",
    "sk_homogenized",
    "ThermoCurves",
    "energy_curve",
    "entropy_production_curve",
    "trace_identity_check",
    "kl_correction",
]

_N_PROBES = 200
_AH_TOL = 1e-8


@dataclass
class LangevinSystem:
    """Friction field A(y), potential U(y), and noise sigma(y).

    A and sigma map batched y of shape (..., d) to (..., d, d) and
    (..., d, m); dA follows dA[..., i, k, j] = d A_ik / d y_j.  The
    ellipticity constant kappa0 (minimum eigenvalue of the symmetric part
    of A over a probe grid) and the Jacobian bound kappa1 are computed at
    construction.  When the scalar-friction metadata h, dh is declared,
    A = h I is verified and the log-derivative direction
    A_h = A^-* grad h is exposed for assumption checks.
    """

    name: str
    d: int
    m: int
    A: callable
    gradU: callable
    sigma: callable
    dA: callable | None = None
    U: callable | None = None
    A_constant: bool = False
    h: callable | None = None
    dh: callable | None = None
    params: dict = field(default_factory=dict)
    kappa0: float = 0.0
    kappa1: float = 0.0

    def __post_init__(self):
        probes = probe_grid(self.d, _N_PROBES, box=5.0)
        Av = np.asarray(self.A(probes), dtype=float)
        Av = np.broadcast_to(Av, (probes.shape[0], self.d, self.d))
        sym = 0.5 * (Av + np.swapaxes(Av, -1, -2))
        lam = np.linalg.eigvalsh(sym)
        self.kappa0 = float(np.min(lam[..., 0]))
        if self.kappa0 <= 0:
            raise ValueError(
                f"symmetric part of A must be positive definite on probes "
                f"(min eigenvalue {self.kappa0:.3e})"
            )
        if self.dA is not None:
            dAv = np.asarray(self.dA(probes), dtype=float)
            dAv = np.broadcast_to(dAv, (probes.shape[0], self.d, self.d, self.d))
            self.kappa1 = float(
                np.max(np.linalg.norm(dAv, axis=(1, 2)))
            )
        if self.h is not None:
            hv = np.asarray(self.h(probes), dtype=float)
            gap = Av - hv[..., None, None] * np.eye(self.d)
            if np.max(np.abs(gap)) > _AH_TOL * (1.0 + np.max(np.abs(hv))):
                raise ValueError("declared scalar friction h does not match A")
            if self.dh is not None:
                grad_h = self._grad_h(probes)
                ah = self.log_friction_direction(probes)
                back = np.einsum("...ki,...k->...i", Av, ah)
                if np.max(np.abs(back - grad_h)) > _AH_TOL * (
                    1.0 + np.max(np.abs(grad_h))
                ):
                    raise ValueError("A_h = A^-* grad h consistency check failed")

    def _grad_h(self, y):
        dv = np.asarray(self.dh(y), dtype=float)
        if dv.shape == np.shape(y)[:-1]:
            dv = dv[..., None]
        return np.broadcast_to(dv, np.shape(y))

    def log_friction_direction(self, y):
        """A_h(y) = A(y)^-* grad h(y), defined when h, dh are declared."""
        if self.h is None or self.dh is None:
            raise ValueError("scalar-friction metadata h, dh not declared")
        Av = np.asarray(self.A(y), dtype=float)
        Av = np.broadcast_to(Av, np.shape(y)[:-1] + (self.d, self.d))
        grad_h = self._grad_h(y)
        return np.linalg.solve(np.swapaxes(Av, -1, -2), grad_h[..., None])[..., 0]

    def sigma_cov(self, y):
        """Frozen equilibrium covariance Sigma(y): A Sigma + Sigma A* = 2 sigma sigma*."""
        y = np.asarray(y, dtype=float)
        Av = np.asarray(self.A(y), dtype=float)
        Av = np.broadcast_to(Av, y.shape[:-1] + (self.d, self.d))
        sv = np.asarray(self.sigma(y), dtype=float)
        sv = np.broadcast_to(sv, y.shape[:-1] + (self.d, self.m))
        M = sv @ np.swapaxes(sv, -1, -2)
        if self.h is not None:
            hv = np.asarray(self.h(y), dtype=float)
            return M / hv[..., None, None]
        flat_A = Av.reshape(-1, self.d, self.d)
        flat_M = M.reshape(-1, self.d, self.d)
        return lyapunov_batch(flat_A, flat_M).reshape(Av.shape)

    def potential(self, y):
        if self.U is None:
            return np.zeros(np.shape(y)[:-1])
        return np.asarray(self.U(y), dtype=float)

    def as_multiscale(self) -> MultiscaleSystem:
        """The validated fast-slow pair for this Langevin system."""
        cached = self.__dict__.get("_ms")
        if cached is not None:
            return cached
        d, m = self.d, self.m

        def bfn(x, y):
            Av = np.asarray(self.A(y), dtype=float)
            return -np.einsum("...ik,...k->...i", Av, np.asarray(x, dtype=float))

        def b_dx(x, y):
            Av = np.asarray(self.A(y), dtype=float)
            return -np.broadcast_to(Av, np.shape(x)[:-1] + (d, d)).copy()

        def cfn(x, y):
            return -np.asarray(self.gradU(y), dtype=float)

        def sfn(x, y):
            sv = np.asarray(self.sigma(y), dtype=float)
            return np.broadcast_to(sv, np.shape(x)[:-1] + (d, m)).copy()

        def Hfn(x, y):
            return np.asarray(x, dtype=float).copy()

        def H_dx(x, y):
            return np.broadcast_to(np.eye(d), np.shape(x)[:-1] + (d, d)).copy()

        sys = MultiscaleSystem(
            name=self.name,
            d=d,
            vartheta=d,
            m=m,
            b=CoefficientField("b", (d,), bfn, d_x=b_dx, alpha=np.inf, beta=np.inf),
            c=CoefficientField("c", (d,), cfn),
            sigma=CoefficientField("sigma", (d, m), sfn),
            F=zero_field("F", (d,)),
            H=CoefficientField("H", (d,), Hfn, d_x=H_dx, alpha=np.inf, beta=np.inf),
            G=zero_field("G", (d, m)),
            flags=SystemFlags(linear_fast=True, langevin=True),
            fast_matrix=self.A,
            fast_matrix_dy=self.dA,
            fast_matrix_constant=self.A_constant,
            params=dict(self.params),
            metadata={"langevin_system": self},
        )
        sys = validate_system(sys)
        self.__dict__["_ms"] = sys
        return sys


# ---------------------------------------------------------------------------
# simulation fronts


def sk_simulate(
    ls: LangevinSystem,
    eps: float,
    v,
    y0,
    t_grid,
    n_paths: int,
    stream: RngStream,
    dt: float | None = None,
    scheme: str = "auto",
) -> TrajectoryEnsemble:
    """Simulate the kinetic pair from the scaled initial datum (eps v, y0)."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    sys = ls.as_multiscale()
    z0 = np.concatenate([float(eps) * v, y0])
    return integrate_multiscale(
        sys, eps, z0, t_grid, n_paths, stream, dt=dt, scheme=scheme
    )


def sk_homogenized(
    ls: LangevinSystem,
    y0,
    t_grid,
    n_paths: int,
    stream: RngStream,
    dt: float | None = None,
) -> TrajectoryEnsemble:
    """Simulate the overdamped limit with the closed-form SK coefficients."""
    from .effective import sk_coefficient_fields

    F_eval, sqrtG_eval, _ = sk_coefficient_fields(ls.A, ls.sigma, ls.gradU, ls.dA)
    return integrate_homogenized(F_eval, sqrtG_eval, y0, t_grid, n_paths, stream, dt=dt)


# ---------------------------------------------------------------------------
# thermodynamic curves


@dataclass
class ThermoCurves:
    """A multiscale observable curve and its local-equilibrium reference."""

    times: np.ndarray
    value: np.ndarray
    stderr: np.ndarray
    reference: np.ndarray
    ref_stderr: np.ndarray
    name: str

    @property
    def gap(self) -> np.ndarray:
        return self.value - self.reference

    @property
    def gap_stderr(self) -> np.ndarray:
        return np.sqrt(self.stderr**2 + self.ref_stderr**2)

    def to_rows(self):
        return [
            (float(t), float(v), float(s), float(r), float(rs))
            for t, v, s, r, rs in zip(
                self.times, self.value, self.stderr, self.reference, self.ref_stderr
            )
        ]


def _curve_stats(values, failed):
    vals = values[~failed]
    n = vals.shape[0]
    return np.mean(vals, axis=0), np.std(vals, axis=0, ddof=1) / np.sqrt(n)


def _align_reference(times, ref_times, ref, ref_se):
    idx = np.array([int(np.argmin(np.abs(ref_times - t))) for t in times])
    return ref[idx], ref_se[idx]


def energy_curve(
    ens: TrajectoryEnsemble, ls: LangevinSystem, ref_ens: TrajectoryEnsemble
) -> ThermoCurves:
    """E[ 1/2 |X|^2 + U(Y) ] against E[ 1/2 tr Sigma(Ybar) + U(Ybar) ]."""
    x, y = ens.split()
    e = 0.5 * np.sum(x * x, axis=-1) + ls.potential(y)
    val, se = _curve_stats(e, ens.failed)
    ybar = ref_ens.states
    Sig = ls.sigma_cov(ybar)
    kin = 0.5 * np.einsum("...ii->...", Sig)
    ref_e = kin + ls.potential(ybar)
    ref, ref_se = _curve_stats(ref_e, ref_ens.failed)
    ref, ref_se = _align_reference(ens.times, ref_ens.times, ref, ref_se)
    return ThermoCurves(ens.times.copy(), val, se, ref, ref_se, "energy")


def entropy_production_curve(
    ens: TrajectoryEnsemble,
    ls: LangevinSystem,
    ref_ens: TrajectoryEnsemble | None = None,
) -> ThermoCurves:
    """E <A(Y) X, X> against E tr sigma sigma*(Ybar).

    With ref_ens omitted the reference is evaluated along the multiscale
    slow marginal itself (an O(eps) perturbation of the limit curve).
    """
    x, y = ens.split()
    Av = np.asarray(ls.A(y), dtype=float)
    Av = np.broadcast_to(Av, x.shape[:-1] + (ls.d, ls.d))
    ep = np.einsum("...ik,...k,...i->...", Av, x, x)
    val, se = _curve_stats(ep, ens.failed)
    if ref_ens is None:
        ref_states, ref_failed, ref_times = y, ens.failed, ens.times
    else:
        ref_states, ref_failed, ref_times = (
            ref_ens.states,
            ref_ens.failed,
            ref_ens.times,
        )
    sv = np.asarray(ls.sigma(ref_states), dtype=float)
    sv = np.broadcast_to(sv, ref_states.shape[:-1] + (ls.d, ls.m))
    tr = np.einsum("...ik,...ik->...", sv, sv)
    ref, ref_se = _curve_stats(tr, ref_failed)
    ref, ref_se = _align_reference(ens.times, ref_times, ref, ref_se)
    return ThermoCurves(ens.times.copy(), val, se, ref, ref_se, "entropy_production")


# ---------------------------------------------------------------------------
# algebraic identities


def trace_identity_check(A, sigma) -> float:
    """|tr(A Sigma) - tr(sigma sigma*)| for the Lyapunov solution Sigma."""
    A = np.asarray(A, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    M = sigma @ sigma.T
    Sig = solve_lyapunov(A, M)
    return float(abs(np.trace(A @ Sig) - np.trace(M)))


def kl_correction(Sigma, d: int | None = None) -> float:
    """KL divergence of N(0, Sigma) from N(0, I): (tr Sigma - log det Sigma - d)/2."""
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1]:
        raise ValueError("Sigma must be a square matrix")
    if d is not None and d != Sigma.shape[0]:
        raise ValueError("declared dimension does not match Sigma")
    if np.max(np.abs(Sigma - Sigma.T)) > 1e-10 * (1.0 + np.max(np.abs(Sigma))):
        raise ValueError("Sigma must be symmetric")
    lam = np.linalg.eigvalsh(0.5 * (Sigma + Sigma.T))
    if lam[0] <= 0:
        raise ValueError("Sigma must be positive definite")
    n = Sigma.shape[0]
    val = 0.5 * (np.sum(lam) - np.sum(np.log(lam)) - n)
    if val < -1e-10:
        raise AssertionError("KL correction evaluated negative; check inputs")
    return float(max(val, 0.0))
