"""Correctors: solutions of the frozen Poisson equation L1 Phi = -H.

L1 is the generator of the frozen fast process at parameter y,

    L1 = b(., y) . grad_x + sigma sigma*(., y) : grad_x^2,

and H is the eps^-1 slow forcing, centered under the frozen equilibrium.
The corrector and its x/y derivatives are the raw material of the
effective drift correction Gamma_1 and diffusion correction Gamma_2.

Two constructions are provided:

* ``corrector_linear`` — for linear fast drift b = -A(y) x with forcing
  H = x the solution is Phi(x, y) = A(y)^-1 x, with parameter derivative
  d_y(A^-1) = -A^-1 (d_y A) A^-1.
* ``corrector_feynman_kac`` — the probabilistic representation
  Phi(x, y) = int_0^T E[H(X_t^y(x), y)] dt truncated at T, tabulated on a
  probe lattice.  All probes (and the y-shifted rebuilds used for
  parameter derivatives) share one noise realization, so the statistical
  error largely cancels in the finite differences.

Derivative conventions (trailing axes):
    dphi_dx[..., i, k]     = d Phi_i / d x_k
    dphi_dy[..., i, j]     = d Phi_i / d y_j
    d2phi_dydx[..., i, j, k] = d^2 Phi_i / d y_j d x_k
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .quadrature import gauss_hermite
from .rng import RngStream
from .systems import MultiscaleSystem, probe_grid

__all__ = [
    "Corrector",
    "zero_corrector",
    "corrector_linear",
    "corrector_feynman_kac",
    "corrector_for",
    "generator_residual",
]

_FD_STEP_A = 1e-5  # step for finite-difference Jacobians of A(y)
_Y_MATCH_TOL = 1e-8


@dataclass
class Corrector:
    """Evaluators for Phi and the derivatives the Gamma terms consume.

    variant "linear" is global in y; "feynman_kac" is tabulated at one y
    (queries at a different y raise); "zero" is the trivial corrector for
    systems with H identically zero.
    """

    variant: str
    d: int
    vartheta: int
    phi: callable  # (x, y) -> (..., vartheta)
    dphi_dx: callable  # (x, y) -> (..., vartheta, d)
    dphi_dy: callable  # (x, y) -> (..., vartheta, vartheta)
    d2phi_dydx: callable  # (x, y) -> (..., vartheta, vartheta, d)
    meta: dict = field(default_factory=dict)


def zero_corrector(d: int, vartheta: int) -> Corrector:
    def phi(x, y):
        return np.zeros(x.shape[:-1] + (vartheta,))

    def dphi_dx(x, y):
        return np.zeros(x.shape[:-1] + (vartheta, d))

    def dphi_dy(x, y):
        return np.zeros(x.shape[:-1] + (vartheta, vartheta))

    def d2(x, y):
        return np.zeros(x.shape[:-1] + (vartheta, vartheta, d))

    return Corrector("zero", d, vartheta, phi, dphi_dx, dphi_dy, d2)


# ---------------------------------------------------------------------------
# linear closed form


def _ainv_and_dainv(A_field, dA_field, y):
    """A^-1 and its parameter Jacobian at batched y.

    dA convention: dA[..., i, k, j] = d A_ik / d y_j; the inverse follows
    d_yj (A^-1) = -A^-1 (d_yj A) A^-1.
    """
    y = np.asarray(y, dtype=float)
    A = np.asarray(A_field(y), dtype=float)
    d = A.shape[-1]
    Ainv = np.linalg.inv(A)
    if dA_field is not None:
        dA = np.asarray(dA_field(y), dtype=float)
    else:
        vt = y.shape[-1]
        cols = []
        for j in range(vt):
            step = np.zeros(vt)
            step[j] = _FD_STEP_A
            Ap = np.asarray(A_field(y + step), dtype=float)
            Am = np.asarray(A_field(y - step), dtype=float)
            cols.append((Ap - Am) / (2.0 * _FD_STEP_A))
        dA = np.stack(cols, axis=-1)
    dAinv = -np.einsum("...ip,...pqj,...qk->...ikj", Ainv, dA, Ainv)
    return Ainv, dAinv


def corrector_linear(A_field, dA_field=None, dim: int = 0) -> Corrector:
    """Closed-form corrector Phi(x, y) = A(y)^-1 x for H(x, y) = x.

    A_field maps batched y (..., vartheta) to (..., d, d); dA_field, if
    given, follows the dA[..., i, k, j] = d A_ik / d y_j convention and
    otherwise central differences with step 1e-5 are used.  The evaluators
    are global in y; `dim` labels d = vartheta when the caller knows it.
    """

    def phi(x, y):
        Ainv, _ = _ainv_and_dainv(A_field, dA_field, y)
        return np.einsum("...ik,...k->...i", Ainv, x)

    def dphi_dx(x, y):
        Ainv, _ = _ainv_and_dainv(A_field, dA_field, y)
        return np.broadcast_to(Ainv, x.shape[:-1] + Ainv.shape[-2:]).copy()

    def dphi_dy(x, y):
        _, dAinv = _ainv_and_dainv(A_field, dA_field, y)
        return np.einsum("...ikj,...k->...ij", dAinv, x)

    def d2(x, y):
        _, dAinv = _ainv_and_dainv(A_field, dA_field, y)
        out = np.swapaxes(dAinv, -1, -2)  # [..., i, j, k] = dAinv[..., i, k, j]
        return np.broadcast_to(out, x.shape[:-1] + out.shape[-3:]).copy()

    return Corrector(
        variant="linear",
        d=dim,
        vartheta=dim,
        phi=phi,
        dphi_dx=dphi_dx,
        dphi_dy=dphi_dy,
        d2phi_dydx=d2,
    )


# ---------------------------------------------------------------------------
# Feynman-Kac tables


def _default_axes(sys: MultiscaleSystem, y, nodes_per_dim=7):
    """Axis-aligned probe lattice shaped by the frozen equilibrium scale."""
    from .frozen import frozen_equilibrium

    nodes, _ = gauss_hermite(nodes_per_dim)
    if sys.flags.linear_fast and sys.fast_matrix is not None:
        eq = frozen_equilibrium(sys, y)
        scale = np.sqrt(np.diag(eq.cov))
        return tuple(s * nodes for s in scale)
    return tuple(np.linspace(-3.0, 3.0, nodes_per_dim) for _ in range(sys.d))


def _fk_table(sys, y, axes, T, dt, n_paths, stream, n_records=128):
    """Tabulate int_0^T E[H(X_t^y(x), y)] dt on the probe lattice.

    Returns (values, stderr, record times, gap series, gap stderr) where
    the gap series tracks max over probes of |mean_paths H| — the
    quantity whose decay certifies the truncation and whose failure to
    decay signals a violated centering condition.
    """
    mesh = np.meshgrid(*axes, indexing="ij")
    grid_shape = mesh[0].shape
    pts = np.stack([m.ravel() for m in mesh], axis=-1)  # (P, d)
    P = pts.shape[0]
    vt = sys.vartheta
    y = np.atleast_1d(np.asarray(y, dtype=float))
    yb = np.broadcast_to(y, (P, n_paths, vt))
    X = np.repeat(pts[:, None, :], n_paths, axis=1).astype(float)
    gen = stream.generator()
    n_steps = int(round(T / dt))
    rec_every = max(1, n_steps // n_records)
    acc = np.zeros((P, n_paths, vt))
    Hprev = np.asarray(sys.H(X, yb), dtype=float)
    rec_t, rec_gap, rec_se = [], [], []
    sqdt = np.sqrt(dt)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, n_steps + 1):
            dW = sqdt * gen.standard_normal((n_paths, sys.m))
            drift = sys.b(X, yb)
            noise = np.einsum("...ik,...k->...i", sys.sigma(X, yb), dW[None])
            X = X + drift * dt + np.sqrt(2.0) * noise
            Hnew = np.asarray(sys.H(X, yb), dtype=float)
            acc += (0.5 * dt) * (Hprev + Hnew)
            Hprev = Hnew
            if k % rec_every == 0 or k == n_steps:
                mean_h = np.mean(Hnew, axis=1)  # (P, vt)
                se_h = np.std(Hnew, axis=1, ddof=1) / np.sqrt(n_paths)
                gap = np.linalg.norm(mean_h, axis=-1)
                rec_t.append(k * dt)
                rec_gap.append(float(np.max(gap)))
                rec_se.append(float(np.mean(np.linalg.norm(se_h, axis=-1))))
    if not np.all(np.isfinite(acc)):
        raise RuntimeError("Feynman-Kac simulation diverged")
    values = np.mean(acc, axis=1).reshape(grid_shape + (vt,))
    stderr = (np.std(acc, axis=1, ddof=1) / np.sqrt(n_paths)).reshape(
        grid_shape + (vt,)
    )
    return values, stderr, np.array(rec_t), np.array(rec_gap), np.array(rec_se)


def _tail_model(rec_t, rec_gap, rec_se, T):
    """Fit exp decay to the resolved part of the gap series.

    Returns (rate or None, tail bound, drifting flag).  Drifting means the
    late-time gap sits well above its noise floor — the signature of an
    uncentered H, whose time integral grows linearly.
    """
    late = rec_t >= 0.75 * T
    noise_floor = 4.0 * np.mean(rec_se[late])
    drifting = bool(np.mean(rec_gap[late]) > max(noise_floor, 1e-12))
    resolved = rec_gap > np.maximum(4.0 * rec_se, 1e-300)
    fit_win = resolved & (rec_t <= 0.5 * T)
    if np.sum(fit_win) >= 3:
        A = np.stack([rec_t[fit_win], np.ones(int(np.sum(fit_win)))], axis=1)
        coef, *_ = np.linalg.lstsq(A, np.log(rec_gap[fit_win]), rcond=None)
        rate = -float(coef[0])
        if rate > 0:
            tail = float(rec_gap[resolved][-1] / rate) if np.any(resolved) else 0.0
            return rate, tail, drifting
    tail = float(rec_gap[-1] * T)
    return None, tail, drifting


def _make_interp(axes, table):
    flat = table.reshape(table.shape[: len(axes)] + (-1,))
    rgi = RegularGridInterpolator(
        axes, flat, method="linear", bounds_error=False, fill_value=None
    )
    out_shape = table.shape[len(axes) :]

    def ev(x):
        vals = rgi(x)
        return vals.reshape(x.shape[:-1] + out_shape)

    return ev


def _lattice_gradient(axes, table):
    """d table / d x_k by second-order differences on the (possibly
    nonuniform) lattice; returns table with a trailing axis k."""
    grads = [
        np.gradient(table, axes[k], axis=k, edge_order=2)
        for k in range(len(axes))
    ]
    return np.stack(grads, axis=-1)


def corrector_feynman_kac(
    sys: MultiscaleSystem,
    y,
    probes=None,
    T_trunc: float = 8.0,
    n_paths: int = 2000,
    stream: RngStream = RngStream(0, 2),
    dt: float = 0.01,
    dy_step: float = 1e-3,
) -> Corrector:
    """Monte Carlo corrector table at parameter y.

    probes may be a tuple of per-dimension axis arrays; by default a
    7-node-per-dimension lattice shaped by the equilibrium scale is used.
    Parameter derivatives rebuild the table at y +- dy_step (relative)
    per coordinate with the identical noise realization.  Raises if the
    probe-averaged forcing fails to decay (centering condition violated).
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    vt = sys.vartheta
    if probes is None:
        axes = _default_axes(sys, y)
    else:
        axes = tuple(np.asarray(a, dtype=float) for a in probes)
        if len(axes) != sys.d:
            raise ValueError("probes must supply one axis per fast dimension")

    values, stderr, rec_t, rec_gap, rec_se = _fk_table(
        sys, y, axes, T_trunc, dt, n_paths, stream
    )
    rate, tail, drifting = _tail_model(rec_t, rec_gap, rec_se, T_trunc)
    if drifting:
        raise ValueError(
            "forcing average does not decay over the truncation horizon; "
            "the centering condition looks violated at this y"
        )

    grad_x = _lattice_gradient(axes, values)  # grid + (i, k)
    tables_dy = []
    for j in range(vt):
        delta = dy_step * (1.0 + abs(float(y[j])))
        shift = np.zeros(vt)
        shift[j] = delta
        vp, *_ = _fk_table(sys, y + shift, axes, T_trunc, dt, n_paths, stream)
        vm, *_ = _fk_table(sys, y - shift, axes, T_trunc, dt, n_paths, stream)
        tables_dy.append((vp - vm) / (2.0 * delta))
    grad_y = np.stack(tables_dy, axis=-1)  # grid + (i, j)
    mixed = np.stack(
        [_lattice_gradient(axes, tables_dy[j]) for j in range(vt)], axis=-2
    )  # grid + (i, j, k)

    ev_phi = _make_interp(axes, values)
    ev_dx = _make_interp(axes, grad_x)
    ev_dy = _make_interp(axes, grad_y)
    ev_d2 = _make_interp(axes, mixed)

    y_ref = y.copy()

    def _check_y(q):
        q = np.atleast_1d(np.asarray(q, dtype=float))
        if np.max(np.abs(q - y_ref)) > _Y_MATCH_TOL:
            raise ValueError(
                "Feynman-Kac corrector was tabulated at a different y"
            )

    def phi(x, yy):
        _check_y(yy)
        return ev_phi(x)

    def dphi_dx(x, yy):
        _check_y(yy)
        return ev_dx(x)

    def dphi_dy(x, yy):
        _check_y(yy)
        return ev_dy(x)

    def d2(x, yy):
        _check_y(yy)
        return ev_d2(x)

    return Corrector(
        variant="feynman_kac",
        d=sys.d,
        vartheta=vt,
        phi=phi,
        dphi_dx=dphi_dx,
        dphi_dy=dphi_dy,
        d2phi_dydx=d2,
        meta={
            "y": y_ref,
            "axes": axes,
            "stderr": stderr,
            "T_trunc": T_trunc,
            "n_paths": n_paths,
            "dt": dt,
            "decay_rate": rate,
            "tail_bound": tail,
            "gap_series": (rec_t, rec_gap, rec_se),
        },
    )


# ---------------------------------------------------------------------------
# dispatch and diagnostics


def corrector_for(
    sys: MultiscaleSystem,
    y,
    stream: RngStream = RngStream(0, 2),
    **fk_kwargs,
) -> Corrector:
    """Pick the corrector construction the system structure supports.

    H identically zero (averaging class) gives the zero corrector;
    linear fast drift with H(x, y) = x gives the closed form; anything
    else falls back to the Feynman-Kac table at this y.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    pts = probe_grid(sys.d, 64, box=3.0)
    yb = np.broadcast_to(y, (pts.shape[0], sys.vartheta))
    Hvals = np.asarray(sys.H(pts, yb), dtype=float)
    if np.max(np.abs(Hvals)) <= 1e-12:
        return zero_corrector(sys.d, sys.vartheta)
    if (
        sys.flags.linear_fast
        and sys.fast_matrix is not None
        and sys.d == sys.vartheta
        and np.max(np.abs(Hvals - pts)) <= 1e-10 * (1.0 + np.max(np.abs(pts)))
    ):
        return corrector_linear(sys.fast_matrix, sys.fast_matrix_dy, dim=sys.d)
    return corrector_feynman_kac(sys, y, stream=stream, **fk_kwargs)


def generator_residual(
    sys: MultiscaleSystem,
    corr: Corrector,
    y,
    probes=None,
    h: float = 1e-4,
):
    """Mean over probes of |L1 Phi + H| with L1 applied by central differences.

    For Monte Carlo correctors choose h comparable to the table spacing;
    the quoted tolerance there is statistical (5 SE), with the common
    noise across probes making the estimate conservative.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if probes is None:
        probes = probe_grid(sys.d, 50, box=2.0)
    probes = np.asarray(probes, dtype=float)
    n = probes.shape[0]
    yb = np.broadcast_to(y, (n, sys.vartheta))
    d = sys.d

    def phi_at(x):
        return corr.phi(x, np.broadcast_to(y, (x.shape[0], sys.vartheta)))

    b = np.asarray(sys.b(probes, yb), dtype=float)
    sig = np.asarray(sys.sigma(probes, yb), dtype=float)
    sig = np.broadcast_to(sig, (n, d, sys.m))
    a = sig @ np.swapaxes(sig, -1, -2)  # diffusion matrix sigma sigma*
    phi0 = phi_at(probes)
    res = np.zeros((n, sys.vartheta))
    for k in range(d):
        ek = np.zeros(d)
        ek[k] = h
        pp = phi_at(probes + ek)
        pm = phi_at(probes - ek)
        first = (pp - pm) / (2.0 * h)
        res += b[:, k : k + 1] * first
        res += a[:, k, k : k + 1] * (pp - 2.0 * phi0 + pm) / h**2
        for l in range(k + 1, d):
            el = np.zeros(d)
            el[l] = h
            ppp = phi_at(probes + ek + el)
            ppm = phi_at(probes + ek - el)
            pmp = phi_at(probes - ek + el)
            pmm = phi_at(probes - ek - el)
            mixed = (ppp - ppm - pmp + pmm) / (4.0 * h**2)
            res += 2.0 * a[:, k, l : l + 1] * mixed
    res = res + np.asarray(sys.H(probes, yb), dtype=float)
    return float(np.mean(np.linalg.norm(res, axis=-1)))
