"""Built-in example systems.

Each preset exercises one structural regime of the fast-slow framework:

* ``averaging-ou``     - c = H = 0, shared noise between rows; plain averaging.
* ``langevin-scalar``  - kinetic Langevin with scalar friction h(y) I.
* ``langevin-matrix``  - kinetic Langevin with a nonsymmetric, y-dependent
                         friction matrix (exercises the noise-induced drift).
* ``torus-1d``         - periodic homogenization pair in one dimension.
* ``torus-2d-shear``   - periodic shear flow in two dimensions.

Builders accept keyword parameters (the config ``coefficients`` mapping);
unknown parameters are a hard error.  ``register`` adds custom presets.
"""

from __future__ import annotations

import inspect
import math
from typing import Callable

import numpy as np

from .systems import (
    CoefficientField,
    ConfigError,
    MultiscaleSystem,
    SystemFlags,
    TestObservable,
    constant_field,
    zero_field,
)

__all__ = ["available", "make", "register", "observable"]

_REGISTRY: dict[str, Callable[..., MultiscaleSystem]] = {}


def register(name: str, builder: Callable[..., MultiscaleSystem]) -> None:
    _REGISTRY[name] = builder


def available() -> list[str]:
    return sorted(_REGISTRY)


def make(name: str, params: dict | None = None) -> MultiscaleSystem:
    """Instantiate a preset by name with parameter overrides."""
    if name not in _REGISTRY:
        raise ConfigError(f"unknown preset {name!r}; available: {available()}")
    builder = _REGISTRY[name]
    params = dict(params or {})
    sig = inspect.signature(builder)
    unknown = set(params) - set(sig.parameters)
    if unknown:
        raise ConfigError(f"preset {name!r}: unknown parameters {sorted(unknown)}")
    return builder(**params)


# --------------------------------------------------------------------------
# averaging-ou


def _averaging_ou() -> MultiscaleSystem:
    b = CoefficientField(
        "b", (1,), lambda x, y: -np.asarray(x, dtype=float),
        d_x=lambda x, y: np.broadcast_to(
            -np.eye(1), np.shape(x)[:-1] + (1, 1)).copy(),
        alpha=np.inf, beta=np.inf,
    )
    F = CoefficientField(
        "F", (1,),
        lambda x, y: np.asarray(x, dtype=float) - np.asarray(y, dtype=float),
        d_x=lambda x, y: np.broadcast_to(np.eye(1), np.shape(x)[:-1] + (1, 1)).copy(),
        d_y=lambda x, y: np.broadcast_to(-np.eye(1), np.shape(y)[:-1] + (1, 1)).copy(),
        alpha=np.inf, beta=np.inf,
    )
    return MultiscaleSystem(
        name="averaging-ou", d=1, vartheta=1, m=1,
        b=b,
        c=zero_field("c", (1,)),
        sigma=constant_field("sigma", np.eye(1)),
        F=F,
        H=zero_field("H", (1,)),
        G=constant_field("G", np.eye(1)),
        flags=SystemFlags(linear_fast=True, averaging=True),
        fast_matrix=lambda y: np.broadcast_to(np.eye(1), np.shape(y)[:-1] + (1, 1)).copy(),
        fast_matrix_dy=lambda y: np.zeros(np.shape(y)[:-1] + (1, 1, 1)),
        fast_matrix_constant=True,
    )


register("averaging-ou", _averaging_ou)


# --------------------------------------------------------------------------
# kinetic Langevin presets (defined through kramers.LangevinSystem)


def _langevin_scalar(kappa0: float = 1.0, sigma0: float = 1.0,
                     h_variation: float = 0.0, u_curv: float = 1.0) -> MultiscaleSystem:
    """Scalar friction h(y) = kappa0 (1 + eta y^2/(1+y^2)), quadratic U.

    The default eta = 0 gives constant friction A = kappa0 I; a positive
    h_variation makes the friction state-dependent, which switches on the
    noise-induced drift.
    """
    from .kramers import LangevinSystem

    k0, s0, eta, uc = float(kappa0), float(sigma0), float(h_variation), float(u_curv)
    if k0 <= 0 or s0 <= 0:
        raise ConfigError("kappa0 and sigma0 must be positive")
    if eta < 0:
        raise ConfigError("h_variation must be >= 0")

    def h(y):
        y1 = np.asarray(y, dtype=float)[..., 0]
        return k0 * (1.0 + eta * y1**2 / (1.0 + y1**2))

    def dh(y):
        y1 = np.asarray(y, dtype=float)[..., 0]
        return k0 * eta * 2.0 * y1 / (1.0 + y1**2) ** 2

    def A(y):
        return h(y)[..., None, None] * np.eye(1)

    def dA(y):
        return dh(y)[..., None, None, None] * np.eye(1)[..., None]

    ls = LangevinSystem(
        name="langevin-scalar",
        d=1, m=1,
        A=A, dA=dA,
        U=lambda y: 0.5 * uc * np.asarray(y, dtype=float)[..., 0] ** 2,
        gradU=lambda y: uc * np.asarray(y, dtype=float),
        sigma=lambda y: np.broadcast_to(
            s0 * np.eye(1), np.shape(y)[:-1] + (1, 1)).copy(),
        A_constant=(eta == 0.0),
        h=h, dh=dh,
        params={"kappa0": k0, "sigma0": s0, "h_variation": eta, "u_curv": uc},
    )
    return ls.as_multiscale()


register("langevin-scalar", _langevin_scalar)


def _langevin_matrix(a1: float = 2.0, a2: float = 2.2, s12: float = 0.5,
                     s21: float = -0.3, tau: float = 0.6) -> MultiscaleSystem:
    """Nonsymmetric 2x2 friction with bounded y-dependence.

    A(y) = [[a1 + tau tanh y1, s12], [s21, a2 + tau tanh y2]].  With the
    defaults the symmetric part stays uniformly positive definite, and
    grad A decays at infinity, so the drift-by-friction term is bounded.
    """
    from .kramers import LangevinSystem

    a1, a2, s12, s21, tau = map(float, (a1, a2, s12, s21, tau))
    lo = min(a1, a2) - abs(tau) - abs(s12 + s21) / 2
    if lo <= 0:
        raise ConfigError("friction parameters give an indefinite symmetric part")
    K = np.array([[1.0, 0.2], [0.2, 1.2]])
    sig = np.array([[1.0, 0.0], [0.3, 0.8]])

    def A(y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape[:-1] + (2, 2))
        out[..., 0, 0] = a1 + tau * np.tanh(y[..., 0])
        out[..., 0, 1] = s12
        out[..., 1, 0] = s21
        out[..., 1, 1] = a2 + tau * np.tanh(y[..., 1])
        return out

    def dA(y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape[:-1] + (2, 2, 2))
        out[..., 0, 0, 0] = tau / np.cosh(y[..., 0]) ** 2
        out[..., 1, 1, 1] = tau / np.cosh(y[..., 1]) ** 2
        return out

    ls = LangevinSystem(
        name="langevin-matrix",
        d=2, m=2,
        A=A, dA=dA,
        U=lambda y: 0.5 * np.einsum("...i,ij,...j->...", np.asarray(y, float), K,
                                    np.asarray(y, float)),
        gradU=lambda y: np.asarray(y, dtype=float) @ K.T,
        sigma=lambda y: np.broadcast_to(sig, np.shape(y)[:-1] + (2, 2)).copy(),
        A_constant=(tau == 0.0),
        params={"a1": a1, "a2": a2, "s12": s12, "s21": s21, "tau": tau},
    )
    return ls.as_multiscale()


register("langevin-matrix", _langevin_matrix)


# --------------------------------------------------------------------------
# periodic homogenization pairs

TWO_PI = 2.0 * math.pi


def _torus_pair(name, d, a_field, b_field, c_const, cutoff) -> MultiscaleSystem:
    """Assemble the fast-slow pair for a periodic single-scale equation.

    The original equation dX = eps^-1 b(X/eps) dt + c(X/eps) dt
    + sqrt(2) sigma(X/eps) dW becomes, in the chart x = X/eps and with the
    centered slow variable Y = X - t mean(b)/eps, exactly a fast-slow pair
    with fast coefficients (b, c, sigma) and slow row (F, H, G) =
    (c, b - mean(b), sigma).  mean(b) is the invariant average of b, found
    spectrally.
    """
    from . import torus

    mu = torus.invariant_density_torus(a_field, b_field, cutoff)
    b_bar = np.atleast_1d(torus.weighted_average(b_field, mu))

    def bfn(x, y):
        return torus.eval_vector(b_field, x)

    def cfn(x, y):
        batch = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
        return np.broadcast_to(c_const, batch + (d,)).copy()

    def sfn(x, y):
        return torus.sqrt_diffusion(a_field, x)

    def Hfn(x, y):
        return torus.eval_vector(b_field, x) - b_bar

    c_const = np.asarray(c_const, dtype=float)
    a_const = None
    if a_field.is_constant:
        probe = np.zeros((1, d))
        a_const = torus.sqrt_diffusion(a_field, probe)[0]
    b = CoefficientField("b", (d,), bfn, alpha=np.inf, beta=np.inf)
    c = CoefficientField("c", (d,), cfn, constant=c_const)
    sigma = CoefficientField("sigma", (d, d), sfn, constant=a_const)
    F = CoefficientField("F", (d,), cfn, constant=c_const)
    H = CoefficientField("H", (d,), Hfn)
    G = CoefficientField("G", (d, d), sfn, constant=a_const)
    return MultiscaleSystem(
        name=name, d=d, vartheta=d, m=d,
        b=b, c=c, sigma=sigma, F=F, H=H, G=G,
        flags=SystemFlags(periodic=True),
        metadata={
            "a_modes": a_field, "b_modes": b_field, "mu_modes": mu,
            "c_const": c_const,
            "b_bar": b_bar, "cutoff": cutoff,
            "H_equals_b_minus_bbar": True,
        },
    )


def _torus_1d(beta: float = 1.0, a0: float = 1.0, a_amp: float = 0.0,
              c0: float = 0.0, cutoff: int = 16) -> MultiscaleSystem:
    """d=1 periodic drift b = beta sin(2 pi x), diffusion a = a0 + a_amp sin."""
    from . import torus

    beta, a0, a_amp, c0 = map(float, (beta, a0, a_amp, c0))
    if a0 - abs(a_amp) <= 0:
        raise ConfigError("need a0 > |a_amp| for ellipticity")
    a_field = torus.harmonic_field(1, {(): a0, (1,): a_amp}, kind="sin")
    b_field = torus.harmonic_field(1, {(1,): beta}, kind="sin")
    return _torus_pair("torus-1d", 1, a_field, b_field, np.array([c0]), cutoff)


register("torus-1d", _torus_1d)


def _torus_2d_shear(beta: float = 1.0, c1: float = 0.0, c2: float = 0.0,
                    cutoff: int = 16) -> MultiscaleSystem:
    """Divergence-free shear b = (beta sin(2 pi x2), 0) with unit diffusion."""
    from . import torus

    beta, c1, c2 = map(float, (beta, c1, c2))
    a_field = torus.identity_matrix_field(2)
    b_field = torus.shear_field(beta)
    return _torus_pair("torus-2d-shear", 2, a_field, b_field,
                       np.array([c1, c2]), cutoff)


register("torus-2d-shear", _torus_2d_shear)


# --------------------------------------------------------------------------
# stock observables for the labs and the command line


def observable(name: str) -> TestObservable:
    if name == "tanh_y1":
        return TestObservable(
            "tanh_y1", lambda x, y: np.tanh(np.asarray(y, float)[..., 0]),
            alpha=np.inf, gamma=np.inf, slow_only=True)
    if name == "y1_sq":
        return TestObservable(
            "y1_sq", lambda x, y: np.asarray(y, float)[..., 0] ** 2,
            alpha=np.inf, gamma=np.inf, slow_only=True)
    if name == "x1":
        return TestObservable(
            "x1", lambda x, y: np.asarray(x, float)[..., 0],
            alpha=np.inf, gamma=np.inf)
    if name == "x1_sq":
        return TestObservable(
            "x1_sq", lambda x, y: np.asarray(x, float)[..., 0] ** 2,
            alpha=np.inf, gamma=np.inf)
    if name == "cos_y1":
        return TestObservable(
            "cos_y1", lambda x, y: np.cos(TWO_PI * np.asarray(y, float)[..., 0]),
            alpha=np.inf, gamma=np.inf, slow_only=True)
    raise ConfigError(f"unknown observable {name!r}")
