"""Homogenized coefficients: Gamma terms, averaged drift/diffusion, SK form.

The corrector Phi feeds two correction fields,

    Gamma_1 = c . grad_x Phi + H . grad_y Phi + 2 sigma G* : grad_x grad_y Phi
    Gamma_2 = H (x) Phi + 2 G sigma* . grad_x Phi,

and the limit coefficients are their equilibrium averages

    F(y) = mu_y(F + Gamma_1),
    G(y) = mu_y(G G* + (Gamma_2 + Gamma_2*)/2),

with the homogenized SDE driven by sqrt(2) G^(1/2) dW.  The quadratic
form of G admits the manifestly nonnegative representation
<xi, G xi> = mu_y |G* xi + sigma* grad_x Phi_xi|^2, which is checked by
``verify_psd_identity``; for Langevin structure (b = -A(y) x, H = x,
F = G = 0) everything collapses to the closed Smoluchowski-Kramers form
implemented in ``effective_sk``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correctors import Corrector, corrector_for
from .frozen import FrozenEquilibrium, frozen_equilibrium
from .lyapunov import lyapunov_batch
from .rng import RngStream
from .systems import MultiscaleSystem, probe_grid

__all__ = [
    "GammaTerms",
    "assemble_gamma",
    "EffectiveDynamics",
    "effective_coefficients",
    "effective_sk",
    "sk_coefficient_fields",
    "psd_sqrt",
    "PsdIdentity",
    "verify_psd_identity",
    "closed_form_evaluators",
    "effective_evaluators",
]

EIG_HARD_FLOOR = -1e-6
SYM_TOL = 1e-10
_SK_FD_STEP = 1e-4


@dataclass
class GammaTerms:
    """Pointwise evaluators of the corrector-driven correction fields."""

    gamma1: callable  # (x, y) -> (..., vartheta)
    gamma2: callable  # (x, y) -> (..., vartheta, vartheta)


def assemble_gamma(sys: MultiscaleSystem, corr: Corrector) -> GammaTerms:
    def gamma1(x, y):
        c = np.asarray(sys.c(x, y), dtype=float)
        H = np.asarray(sys.H(x, y), dtype=float)
        sig = np.asarray(sys.sigma(x, y), dtype=float)
        Gv = np.asarray(sys.G(x, y), dtype=float)
        dx = np.asarray(corr.dphi_dx(x, y), dtype=float)
        dy = np.asarray(corr.dphi_dy(x, y), dtype=float)
        d2 = np.asarray(corr.d2phi_dydx(x, y), dtype=float)
        out = np.einsum("...k,...ik->...i", c, dx)
        out = out + np.einsum("...j,...ij->...i", H, dy)
        sigG = np.einsum("...kl,...jl->...kj", sig, Gv)
        out = out + 2.0 * np.einsum("...kj,...ijk->...i", sigG, d2)
        return out

    def gamma2(x, y):
        H = np.asarray(sys.H(x, y), dtype=float)
        Gv = np.asarray(sys.G(x, y), dtype=float)
        sig = np.asarray(sys.sigma(x, y), dtype=float)
        phi = np.asarray(corr.phi(x, y), dtype=float)
        dx = np.asarray(corr.dphi_dx(x, y), dtype=float)
        out = np.einsum("...i,...j->...ij", H, phi)
        Gsig = np.einsum("...il,...kl->...ik", Gv, sig)
        out = out + 2.0 * np.einsum("...ik,...jk->...ij", Gsig, dx)
        return out

    return GammaTerms(gamma1, gamma2)


# ---------------------------------------------------------------------------
# square root and container


def psd_sqrt(G) -> np.ndarray:
    """Symmetric square root with eigenvalues clipped at zero."""
    G = np.asarray(G, dtype=float)
    asym = np.max(np.abs(G - np.swapaxes(G, -1, -2)))
    if asym > SYM_TOL * (1.0 + np.max(np.abs(G))):
        raise ValueError(f"matrix asymmetry {asym:.3e} beyond tolerance")
    w, V = np.linalg.eigh(0.5 * (G + np.swapaxes(G, -1, -2)))
    root = np.sqrt(np.clip(w, 0.0, None))
    return np.einsum("...ik,...k,...jk->...ij", V, root, V)


@dataclass
class EffectiveDynamics:
    """Limit coefficients at one parameter value y."""

    y: np.ndarray
    F: np.ndarray  # (vartheta,)
    G: np.ndarray  # (vartheta, vartheta) symmetric PSD
    sqrtG: np.ndarray  # sqrtG sqrtG* = G
    noise_induced: np.ndarray | None = None
    provenance: str = "general-quadrature"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        self.F = np.atleast_1d(np.asarray(self.F, dtype=float))
        self.G = np.asarray(self.G, dtype=float)
        self.sqrtG = np.asarray(self.sqrtG, dtype=float)
        resid = np.linalg.norm(self.sqrtG @ self.sqrtG.T - self.G)
        if resid > 1e-10 * (1.0 + np.linalg.norm(self.G)):
            raise ValueError("sqrtG does not reproduce G")


def _floor_psd(G, context):
    w, V = np.linalg.eigh(G)
    if w[0] < EIG_HARD_FLOOR:
        raise ArithmeticError(
            f"{context}: eigenvalue {w[0]:.3e} below the assembly-noise floor"
        )
    w = np.clip(w, 0.0, None)
    return (V * w) @ V.T


def effective_coefficients(
    sys: MultiscaleSystem,
    gamma: GammaTerms,
    eq: FrozenEquilibrium,
    y,
) -> EffectiveDynamics:
    """Equilibrium averages F(y), G(y) and the PSD square root.

    Gaussian equilibria integrate by tensor Gauss-Hermite quadrature,
    empirical ones by particle averages (standard errors recorded in
    meta).  Eigenvalues of G in [-1e-6, 0) are floored to zero silently;
    anything lower raises, since quadrature noise cannot plausibly
    explain it.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    vt = sys.vartheta

    def f_int(x):
        yb = np.broadcast_to(y, x.shape[:-1] + (vt,))
        return np.asarray(sys.F(x, yb), dtype=float) + gamma.gamma1(x, yb)

    def g_int(x):
        yb = np.broadcast_to(y, x.shape[:-1] + (vt,))
        Gv = np.asarray(sys.G(x, yb), dtype=float)
        GG = np.einsum("...il,...jl->...ij", Gv, Gv)
        g2 = gamma.gamma2(x, yb)
        return GG + 0.5 * (g2 + np.swapaxes(g2, -1, -2))

    meta = {"eq_kind": eq.kind}
    if eq.kind == "empirical":
        fv = f_int(eq.particles)
        gv = g_int(eq.particles)
        n = fv.shape[0]
        Fbar = np.mean(fv, axis=0)
        Gbar = np.mean(gv, axis=0)
        meta["F_se"] = np.std(fv, axis=0, ddof=1) / np.sqrt(n)
        meta["G_se"] = np.std(gv, axis=0, ddof=1) / np.sqrt(n)
        meta["ess"] = eq.meta.get("ess")
    else:
        Fbar = np.asarray(eq.expect(f_int), dtype=float)
        Gbar = np.asarray(eq.expect(g_int), dtype=float)
    Gbar = 0.5 * (Gbar + Gbar.T)
    Gbar = _floor_psd(Gbar, "effective diffusion")
    return EffectiveDynamics(
        y=y,
        F=Fbar,
        G=Gbar,
        sqrtG=psd_sqrt(Gbar),
        provenance="general-quadrature",
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Smoluchowski-Kramers closed form


def _dainv(A_field, dA_field, y, A, Ainv):
    if dA_field is not None:
        dA = np.asarray(dA_field(y), dtype=float)
    else:
        vt = y.shape[-1]
        cols = []
        for j in range(vt):
            step = np.zeros(vt)
            step[j] = _SK_FD_STEP
            Ap = np.asarray(A_field(y + step), dtype=float)
            Am = np.asarray(A_field(y - step), dtype=float)
            cols.append((Ap - Am) / (2.0 * _SK_FD_STEP))
        dA = np.stack(cols, axis=-1)
    dA = np.broadcast_to(dA, A.shape + (y.shape[-1],))
    return -np.einsum("...ip,...pqj,...qk->...ikj", Ainv, dA, Ainv)


def sk_coefficient_fields(A_field, sigma_field, gradU_field, dA_field=None):
    """Batched (F_eval, sqrtG_eval) for the Smoluchowski-Kramers limit.

    F = -A^-1 grad U + B with the noise-induced drift
    B_i = sum_jk Sigma_jk d_yj (A^-1)_ik, Sigma the frozen Lyapunov
    covariance; G = A^-1 sigma sigma* A^-*.  Evaluators accept y of shape
    (..., vartheta).
    """

    def core(y):
        y = np.asarray(y, dtype=float)
        A = np.asarray(A_field(y), dtype=float)
        d = A.shape[-1]
        A = np.broadcast_to(A, y.shape[:-1] + (d, d))
        sig = np.asarray(sigma_field(y), dtype=float)
        sig = np.broadcast_to(sig, y.shape[:-1] + (d, sig.shape[-1]))
        gU = np.asarray(gradU_field(y), dtype=float)
        Ainv = np.linalg.inv(A)
        M = sig @ np.swapaxes(sig, -1, -2)
        G = Ainv @ M @ np.swapaxes(Ainv, -1, -2)
        Sig = lyapunov_batch(A, M)
        dAinv = _dainv(A_field, dA_field, y, A, Ainv)
        B = np.einsum("...jk,...ikj->...i", Sig, dAinv)
        F = -np.einsum("...ik,...k->...i", Ainv, gU) + B
        return F, G, B

    def F_eval(y):
        return core(y)[0]

    def sqrtG_eval(y):
        return psd_sqrt(core(y)[1])

    return F_eval, sqrtG_eval, core


def effective_sk(
    A_field, sigma_field, gradU_field, y, dA_field=None
) -> EffectiveDynamics:
    """Closed-form limit coefficients at a single y (see sk_coefficient_fields)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    _, _, core = sk_coefficient_fields(A_field, sigma_field, gradU_field, dA_field)
    F, G, B = core(y[None])
    G = 0.5 * (G[0] + G[0].T)
    return EffectiveDynamics(
        y=y,
        F=F[0],
        G=G,
        sqrtG=psd_sqrt(G),
        noise_induced=B[0],
        provenance="sk-closed-form",
    )


# ---------------------------------------------------------------------------
# positivity identity


@dataclass
class PsdIdentity:
    """Paired estimates of <xi, G xi> and mu_y |G* xi + sigma* grad Phi_xi|^2."""

    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float
    gap_se: float

    @property
    def gap(self) -> float:
        return self.lhs - self.rhs


def verify_psd_identity(
    sys: MultiscaleSystem,
    corr: Corrector,
    eq: FrozenEquilibrium,
    y,
    xi,
    n_samples: int = 100_000,
    stream: RngStream = RngStream(0, 2),
    method: str = "sample",
) -> PsdIdentity:
    """Check the nonnegative representation of the effective diffusion.

    Both sides are evaluated on the same equilibrium draw, so gap_se is
    the standard error of the paired difference; with method="quadrature"
    (Gaussian equilibria) the returned standard errors are zero.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    gamma = assemble_gamma(sys, corr)

    def lhs_int(x):
        yb = np.broadcast_to(y, x.shape[:-1] + (sys.vartheta,))
        Gv = np.asarray(sys.G(x, yb), dtype=float)
        GG = np.einsum("...il,...jl->...ij", Gv, Gv)
        quad = GG + gamma.gamma2(x, yb)
        return np.einsum("i,...ij,j->...", xi, quad, xi)

    def rhs_int(x):
        yb = np.broadcast_to(y, x.shape[:-1] + (sys.vartheta,))
        Gv = np.asarray(sys.G(x, yb), dtype=float)
        sig = np.asarray(sys.sigma(x, yb), dtype=float)
        dx = np.asarray(corr.dphi_dx(x, yb), dtype=float)
        gxi = np.einsum("...il,i->...l", Gv, xi)
        grad_xi = np.einsum("i,...ik->...k", xi, dx)
        sgrad = np.einsum("...kl,...k->...l", sig, grad_xi)
        return np.sum((gxi + sgrad) ** 2, axis=-1)

    if method == "quadrature":
        lhs = float(eq.expect(lhs_int))
        rhs = float(eq.expect(rhs_int))
        return PsdIdentity(lhs, rhs, 0.0, 0.0, 0.0)
    if method != "sample":
        raise ValueError(f"unknown method {method!r}")
    x = eq.sample(n_samples, stream)
    lv = np.asarray(lhs_int(x), dtype=float)
    rv = np.asarray(rhs_int(x), dtype=float)
    n = lv.shape[0]
    lhs, rhs = float(np.mean(lv)), float(np.mean(rv))
    lhs_se = float(np.std(lv, ddof=1) / np.sqrt(n))
    rhs_se = float(np.std(rv, ddof=1) / np.sqrt(n))
    gap_se = float(np.std(lv - rv, ddof=1) / np.sqrt(n))
    return PsdIdentity(lhs, rhs, lhs_se, rhs_se, gap_se)


# ---------------------------------------------------------------------------
# evaluators for the homogenized integrator


def _averaging_closed_form(sys: MultiscaleSystem):
    """Exact evaluators when c = H = 0, F affine in x, G independent of x,
    and the fast equilibrium is centered Gaussian: the x-average of an
    affine F is F(0, y)."""
    pts = probe_grid(sys.d, 16, box=2.0)
    y0 = np.zeros((pts.shape[0], sys.vartheta))
    F0 = np.asarray(sys.F(np.zeros_like(pts), y0), dtype=float)
    Fp = np.asarray(sys.F(pts, y0), dtype=float)
    Fm = np.asarray(sys.F(-pts, y0), dtype=float)
    if np.max(np.abs(0.5 * (Fp + Fm) - F0)) > 1e-10 * (1.0 + np.max(np.abs(F0))):
        return None  # F not affine in x
    Gp = np.asarray(sys.G(pts, y0), dtype=float)
    G0 = np.asarray(sys.G(np.zeros_like(pts), y0), dtype=float)
    if np.max(np.abs(Gp - G0)) > 1e-12:
        return None  # G depends on x

    def F_eval(y):
        zeros = np.zeros(y.shape[:-1] + (sys.d,))
        return np.asarray(sys.F(zeros, y), dtype=float)

    def sqrtG_eval(y):
        zeros = np.zeros(y.shape[:-1] + (sys.d,))
        Gv = np.asarray(sys.G(zeros, y), dtype=float)
        GG = np.einsum("...il,...jl->...ij", Gv, Gv)
        return psd_sqrt(GG)

    return F_eval, sqrtG_eval


def closed_form_evaluators(sys: MultiscaleSystem):
    """(F_eval, sqrtG_eval) in closed form where the structure allows it.

    Returns None when only the general quadrature path applies.  Covers:
    the averaging class with affine slow drift, Langevin systems via the
    SK formulas, and periodic pair systems whose presets precomputed the
    constant torus coefficients.
    """
    ls = sys.metadata.get("langevin_system")
    if ls is not None:
        F_eval, sqrtG_eval, _ = sk_coefficient_fields(
            ls.A, ls.sigma, ls.gradU, ls.dA
        )
        return F_eval, sqrtG_eval
    if sys.flags.periodic and "a_modes" in sys.metadata:
        cached = sys.metadata.get("_torus_effective")
        if cached is None:
            from . import torus

            data = torus.effective_torus(
                sys.metadata["a_modes"],
                sys.metadata["b_modes"],
                sys.metadata["c_const"],
                sys.metadata["cutoff"],
            )
            cached = (np.asarray(data.F, dtype=float), np.asarray(data.G, dtype=float))
            sys.metadata["_torus_effective"] = cached
        Fc, Gc = cached
        Sc = psd_sqrt(Gc)

        def F_eval(y):
            return np.broadcast_to(Fc, y.shape)

        def sqrtG_eval(y):
            return np.broadcast_to(Sc, y.shape[:-1] + Sc.shape)

        return F_eval, sqrtG_eval
    if sys.flags.averaging and sys.flags.linear_fast:
        return _averaging_closed_form(sys)
    return None


def effective_evaluators(
    sys: MultiscaleSystem,
    stream: RngStream = RngStream(0, 2),
    cache_tol: float = 1e-8,
    prefer_closed_form: bool = True,
):
    """Evaluators (F_eval, sqrtG_eval) for integrate_homogenized.

    Closed forms are used when available; otherwise each distinct y (up to
    cache_tol) triggers corrector construction, frozen equilibrium, and
    quadrature, with results memoized.  The general path is meant for
    verification-scale runs, not large ensembles.
    """
    if prefer_closed_form:
        cf = closed_form_evaluators(sys)
        if cf is not None:
            return cf

    cache: dict = {}

    def lookup(yrow):
        key = tuple(np.round(yrow / cache_tol).astype(np.int64))
        hit = cache.get(key)
        if hit is None:
            corr = corrector_for(sys, yrow, stream=stream.child(len(cache)))
            eq = frozen_equilibrium(sys, yrow, stream=stream.child(1))
            eff = effective_coefficients(
                sys, assemble_gamma(sys, corr), eq, yrow
            )
            hit = cache.setdefault(key, (eff.F, eff.sqrtG))
        return hit

    def F_eval(y):
        y2 = np.asarray(y, dtype=float).reshape(-1, sys.vartheta)
        out = np.empty_like(y2)
        for i, row in enumerate(y2):
            out[i] = lookup(row)[0]
        return out.reshape(np.shape(y))

    def sqrtG_eval(y):
        y2 = np.asarray(y, dtype=float).reshape(-1, sys.vartheta)
        vt = sys.vartheta
        out = np.empty((y2.shape[0], vt, vt))
        for i, row in enumerate(y2):
            out[i] = lookup(row)[1]
        return out.reshape(np.shape(y)[:-1] + (vt, vt))

    return F_eval, sqrtG_eval
