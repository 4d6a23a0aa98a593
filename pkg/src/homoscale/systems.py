"""Core types for fully coupled fast-slow SDE systems.

The systems modeled here have a fast component X in R^d and a slow
component Y in R^vartheta driven by one m-dimensional Brownian motion W:

    dX = eps^-2 b(X,Y) dt + eps^-1 c(X,Y) dt + sqrt(2) eps^-1 sigma(X,Y) dW
    dY = F(X,Y) dt + eps^-1 H(X,Y) dt + sqrt(2) G(X,Y) dW

The same increment dW feeds both rows; that cross-correlation is part of
the model and the integrators preserve it.  Construction validates shapes,
declared structural flags, and the ellipticity bracket of sigma sigma* on a
deterministic quasi-random probe grid.  Validation is a probe diagnostic,
not a proof: it catches wiring mistakes, nothing more.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
from scipy.stats import qmc

__all__ = [
    "ConfigError",
    "CoefficientField",
    "PolynomialWeight",
    "TestObservable",
    "SystemFlags",
    "MultiscaleSystem",
    "build_system",
    "probe_grid",
    "validate_system",
]

PROBE_COUNT = 1000
PROBE_BOX = 5.0
FD_STEP = 1e-5
FD_RTOL = 1e-5


class ConfigError(ValueError):
    """Malformed system configuration (unknown key, bad shape, bad flag)."""


# --------------------------------------------------------------------------
# coefficient fields


@dataclass(frozen=True)
class CoefficientField:
    """One coefficient of the system: a map (x, y) -> tensor.

    fn must be vectorized: x of shape (..., d) and y of shape (..., vartheta)
    produce output of shape (..., *out_shape).  Scalars use out_shape ().
    Optional analytic derivatives d_x / d_y append the differentiation axis
    last: d_x -> (..., *out_shape, d), d_y -> (..., *out_shape, vartheta).
    alpha/beta are declared Holder exponents in x and y (metadata only).
    """

    name: str
    out_shape: tuple[int, ...]
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    d_x: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    d_y: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    alpha: float | None = None
    beta: float | None = None
    constant: np.ndarray | None = None  # set when fn ignores (x, y)

    def __call__(self, x, y):
        return self.fn(x, y)

    def fd_dx(self, x, y, h: float = FD_STEP):
        """Central finite-difference x-gradient, shape (..., *out_shape, d)."""
        x = np.asarray(x, dtype=float)
        cols = []
        for k in range(x.shape[-1]):
            e = np.zeros(x.shape[-1])
            e[k] = h
            cols.append((self.fn(x + e, y) - self.fn(x - e, y)) / (2 * h))
        return np.stack(cols, axis=-1)

    def fd_dy(self, x, y, h: float = FD_STEP):
        y = np.asarray(y, dtype=float)
        cols = []
        for j in range(y.shape[-1]):
            e = np.zeros(y.shape[-1])
            e[j] = h
            cols.append((self.fn(x, y + e) - self.fn(x, y - e)) / (2 * h))
        return np.stack(cols, axis=-1)


def constant_field(name: str, value) -> CoefficientField:
    value = np.asarray(value, dtype=float)

    def fn(x, y):
        batch = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
        return np.broadcast_to(value, batch + value.shape).copy()

    return CoefficientField(
        name, value.shape, fn, alpha=np.inf, beta=np.inf, constant=value
    )


def zero_field(name: str, out_shape: tuple[int, ...]) -> CoefficientField:
    return constant_field(name, np.zeros(out_shape))


# --------------------------------------------------------------------------
# weights and observables


@dataclass(frozen=True)
class PolynomialWeight:
    """Growth weight rho(x) = 1 + |x|^r for a nonnegative exponent r.

    The translation bound rho(x+h) <= C rho(x) for |h| <= 1 holds with
    C = 2^r when r >= 1.  For r in (0, 1) the sharp constant at x = 0 is
    1 + |h|^r <= 2, so the constant is floored at 2.  Negative exponents are
    rejected: 1 + |x|^r is then singular at the origin and tends to 1 at
    infinity, so it represents neither growth nor decay and admits no
    finite translation constant.
    """

    r: float

    def __post_init__(self):
        if not np.isfinite(self.r) or self.r < 0:
            raise ValueError("weight exponent must be finite and >= 0")

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        nrm = np.linalg.norm(x, axis=-1)
        return 1.0 + nrm**self.r

    @property
    def shift_constant(self) -> float:
        return float(2.0 ** max(abs(self.r), 1.0))


@dataclass(frozen=True)
class TestObservable:
    """Observable phi(x, y) with regularity metadata and weights.

    phi_bar, when supplied, is the closed-form conditional mean
    y -> mu_y(phi(., y)) under the system's Gaussian frozen equilibrium.
    slow_only declares that phi does not depend on x, in which case the
    conditional mean is phi itself.
    """

    name: str
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    alpha: float = 1.0
    gamma: float = 1.0
    weight_x: PolynomialWeight = field(default_factory=lambda: PolynomialWeight(2.0))
    weight_y: PolynomialWeight = field(default_factory=lambda: PolynomialWeight(2.0))
    phi_bar: Callable[[np.ndarray], np.ndarray] | None = None
    slow_only: bool = False

    def __call__(self, x, y):
        return self.fn(x, y)

    def conditional_mean(self, y):
        """Closed-form mu_y(phi(., y)); requires phi_bar or slow_only."""
        if self.phi_bar is not None:
            return self.phi_bar(y)
        if self.slow_only:
            y = np.asarray(y, dtype=float)
            return self.fn(np.zeros_like(y[..., :1]), y)
        raise ValueError(f"observable {self.name!r} has no closed-form conditional mean")


# --------------------------------------------------------------------------
# the system


@dataclass(frozen=True)
class SystemFlags:
    linear_fast: bool = False
    averaging: bool = False
    langevin: bool = False
    periodic: bool = False
    non_degenerate_fast: bool = True

    @classmethod
    def from_dict(cls, d: Mapping) -> "SystemFlags":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown flags: {sorted(unknown)}")
        return cls(**{k: bool(v) for k, v in d.items()})


@dataclass(frozen=True)
class MultiscaleSystem:
    """Validated fast-slow system with structural flags.

    For linear_fast systems the fast drift is b(x,y) = -A(y) x and
    fast_matrix / fast_matrix_dy expose A and its y-Jacobian directly
    (dy convention: [..., i, k, j] = d A_ik / d y_j).  metadata carries
    preset-specific extras (scalar friction h, known averages, ...).
    """

    name: str
    d: int
    vartheta: int
    m: int
    b: CoefficientField
    c: CoefficientField
    sigma: CoefficientField
    F: CoefficientField
    H: CoefficientField
    G: CoefficientField
    flags: SystemFlags = field(default_factory=SystemFlags)
    fast_matrix: Callable[[np.ndarray], np.ndarray] | None = None
    fast_matrix_dy: Callable[[np.ndarray], np.ndarray] | None = None
    fast_matrix_constant: bool = False
    params: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    ellipticity: tuple[float, float] | None = None

    @property
    def state_dim(self) -> int:
        return self.d + self.vartheta

    def split_state(self, z):
        z = np.asarray(z)
        return z[..., : self.d], z[..., self.d :]

    def join_state(self, x, y):
        return np.concatenate([np.asarray(x), np.asarray(y)], axis=-1)

    def with_flags(self, **kw) -> "MultiscaleSystem":
        return replace(self, flags=replace(self.flags, **kw))


# --------------------------------------------------------------------------
# validation


def probe_grid(dim: int, n: int = PROBE_COUNT, box: float = PROBE_BOX) -> np.ndarray:
    """Deterministic quasi-random probes in [-box, box]^dim (Halton)."""
    sampler = qmc.Halton(d=dim, scramble=False)
    pts = sampler.random(n)
    return (2 * pts - 1) * box


def _check_shape(name, got, want):
    if tuple(got) != tuple(want):
        raise ConfigError(f"field {name}: output shape {tuple(got)}, declared {tuple(want)}")


def validate_system(sys: MultiscaleSystem, n_probes: int = PROBE_COUNT) -> MultiscaleSystem:
    """Probe-grid validation; returns the system with ellipticity filled in.

    Checks output shapes of all six fields, the declared structural flags
    (averaging => c,H vanish; linear_fast => b + A(y)x = 0), agreement of
    analytic gradients with central differences on a probe subset, and the
    ellipticity bracket of sigma sigma* when non_degenerate_fast is set.
    """
    pts = probe_grid(sys.d + sys.vartheta, n_probes)
    x, y = pts[:, : sys.d], pts[:, sys.d :]

    want = {
        "b": (sys.d,),
        "c": (sys.d,),
        "sigma": (sys.d, sys.m),
        "F": (sys.vartheta,),
        "H": (sys.vartheta,),
        "G": (sys.vartheta, sys.m),
    }
    vals = {}
    for key in want:
        f: CoefficientField = getattr(sys, key)
        v = np.asarray(f(x, y), dtype=float)
        _check_shape(f.name, v.shape[1:], want[key])
        _check_shape(f.name + " (declared)", f.out_shape, want[key])
        if not np.all(np.isfinite(v)):
            raise ConfigError(f"field {f.name}: non-finite values on probe grid")
        vals[key] = v

    if sys.flags.averaging:
        if np.max(np.abs(vals["c"])) != 0.0 or np.max(np.abs(vals["H"])) != 0.0:
            raise ConfigError("averaging flag set but c or H is nonzero on probes")
    if sys.flags.linear_fast:
        if sys.fast_matrix is None:
            raise ConfigError("linear_fast flag set but no fast_matrix supplied")
        A = np.asarray(sys.fast_matrix(y), dtype=float)
        resid = vals["b"] + np.einsum("nik,nk->ni", A, x)
        if np.max(np.abs(resid)) > 1e-8 * (1 + np.max(np.abs(vals["b"]))):
            raise ConfigError("linear_fast flag set but b(x,y) != -A(y) x on probes")
    if sys.flags.langevin:
        if np.max(np.abs(vals["F"])) != 0.0 or np.max(np.abs(vals["G"])) != 0.0:
            raise ConfigError("langevin flag set but F or G is nonzero on probes")
        if sys.d != sys.vartheta:
            raise ConfigError("langevin flag requires d == vartheta")
        hres = vals["H"] - x
        if np.max(np.abs(hres)) > 1e-12 * (1 + np.max(np.abs(x))):
            raise ConfigError("langevin flag set but H(x,y) != x on probes")

    # analytic gradients vs central differences on a small probe subset
    sub = slice(0, 16)
    for key in want:
        f: CoefficientField = getattr(sys, key)
        for which, ana, fd in (
            ("d_x", f.d_x, f.fd_dx),
            ("d_y", f.d_y, f.fd_dy),
        ):
            if ana is None:
                continue
            a = np.asarray(ana(x[sub], y[sub]), dtype=float)
            n = fd(x[sub], y[sub])
            err = np.max(np.abs(a - n)) / (1.0 + np.max(np.abs(a)))
            if err > FD_RTOL:
                raise ConfigError(
                    f"field {f.name}: analytic {which} disagrees with central "
                    f"differences (relative error {err:.2e})"
                )

    a_xx = np.einsum("nim,njm->nij", vals["sigma"], vals["sigma"])
    eigs = np.linalg.eigvalsh(a_xx)
    lam_min, lam_max = float(eigs[:, 0].min()), float(eigs[:, -1].max())
    if sys.flags.non_degenerate_fast and lam_min <= 0.0:
        raise ConfigError(
            f"non_degenerate_fast declared but min eig of sigma sigma* on probes "
            f"is {lam_min:.3e}"
        )
    return replace(sys, ellipticity=(lam_min, lam_max))


# --------------------------------------------------------------------------
# config entry point

_TOP_KEYS = {"dims", "preset", "coefficients", "flags"}
_DIM_KEYS = {"d", "vartheta", "m"}


def build_system(spec: Mapping) -> MultiscaleSystem:
    """Build and validate a system from a JSON-style config mapping.

    Schema: {"preset": name, "dims": {"d","vartheta","m"}?,
    "coefficients": {preset parameters}?, "flags": {bool overrides}?}.
    dims, when given, must match the preset.  Unknown keys anywhere are a
    hard error.  Fully custom systems are built through the Python preset
    registry (homoscale.presets.register) rather than through config text.
    """
    from . import presets  # deferred: presets pulls in heavier modules

    if not isinstance(spec, Mapping):
        raise ConfigError("system spec must be a mapping")
    unknown = set(spec) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "preset" not in spec:
        raise ConfigError("config must name a preset (see homoscale.presets.available())")
    name = spec["preset"]
    params = spec.get("coefficients", {})
    if not isinstance(params, Mapping):
        raise ConfigError("coefficients must be a mapping of preset parameters")

    sys = presets.make(name, dict(params))

    if "flags" in spec:
        if not isinstance(spec["flags"], Mapping):
            raise ConfigError("flags must be a mapping")
        known = set(SystemFlags.__dataclass_fields__)
        unknown = set(spec["flags"]) - known
        if unknown:
            raise ConfigError(f"unknown flags: {sorted(unknown)}")
        sys = sys.with_flags(**{k: bool(v) for k, v in spec["flags"].items()})

    if "dims" in spec:
        dims = spec["dims"]
        if not isinstance(dims, Mapping):
            raise ConfigError("dims must be a mapping")
        unknown = set(dims) - _DIM_KEYS
        if unknown:
            raise ConfigError(f"unknown dims keys: {sorted(unknown)}")
        got = {"d": sys.d, "vartheta": sys.vartheta, "m": sys.m}
        for k, v in dims.items():
            if int(v) != got[k]:
                raise ConfigError(f"dims[{k!r}]={v} but preset {name!r} has {got[k]}")

    return validate_system(sys)
