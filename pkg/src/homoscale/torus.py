"""Spectral homogenization on the flat torus and Zvonkin regularization.

Everything here works in a truncated Fourier basis e^{2 pi i k.x} with
integer modes |k_j| <= N.  Multiplication by a coefficient field becomes a
convolution matrix re-truncated at the cutoff, derivatives are diagonal,
and the generator

    L0 = a(x) : grad^2 + b(x) . grad        (a = sigma sigma*)

is a dense complex matrix on the mode lattice.  The invariant density
solves the adjoint system with the zero mode pinned to total mass one, the
cell problem is solved by least squares with the additive constant fixed
by mu-centering, and the homogenized coefficients are the weighted
averages

    b_bar = int b dmu,   F = int K c dmu,   G = int K a K* dmu,

with K = I + grad Phi.  Integrands are trigonometric polynomials of
degree <= 4N, so uniform-grid averages with > 4N points per dimension are
exact up to roundoff.

The Zvonkin half regularizes a rough divergence-free drift: it solves
Delta u - lambda u + b . grad u = f by the resolvent fixed point, doubles
lambda until grad u is a strict contraction, and pushes the coefficients
through the change of variables y = x + u(x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream

TWO_PI = 2.0 * math.pi
_HERM_TOL = 1e-12
_EVAL_CHUNK = 4_000_000  # max phase-table entries per evaluation chunk

__all__ = [
    "FourierField",
    "harmonic_field",
    "identity_matrix_field",
    "shear_field",
    "sqrt_diffusion",
    "weighted_average",
    "eval_vector",
    "uniform_grid",
    "generator_matrix",
    "invariant_density_torus",
    "cell_problem_torus",
    "TorusHomogData",
    "effective_torus",
    "gaussian_fourier_reference",
    "torus_uniform_error",
    "ZvonkinTransform",
    "zvonkin_solve",
    "ZvonkinSystem",
    "zvonkin_transform_system",
    "synth_divergence_free_drift",
]


def _lattice(d: int, N: int) -> np.ndarray:
    axes = [np.arange(-N, N + 1)] * d
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


def uniform_grid(d: int, P: int) -> np.ndarray:
    """Tensor grid of P^d points at coordinates j/P, shape (P^d, d)."""
    axes = [np.arange(P) / P] * d
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


@dataclass(frozen=True)
class FourierField:
    """Band-limited real field on the d-torus.

    coeffs is complex of shape comp_shape + (2N+1,)*d; the trailing d axes
    index modes k_j = -N..N.  Hermitian symmetry c_{-k} = conj(c_k) is
    required at construction (tolerance 1e-12) and then enforced exactly,
    so evaluation is real.  comp_shape () is a scalar field, (d,) a vector
    field, (d, d) a matrix field.
    """

    d: int
    N: int
    coeffs: np.ndarray

    def __post_init__(self):
        if self.d < 1 or self.N < 0:
            raise ValueError("need d >= 1 and N >= 0")
        c = np.asarray(self.coeffs, dtype=complex)
        tail = (2 * self.N + 1,) * self.d
        if c.shape[-self.d :] != tail:
            raise ValueError(
                f"coefficient array has mode shape {c.shape[-self.d:]}, "
                f"expected {tail}"
            )
        mirror = np.flip(c, axis=tuple(range(-self.d, 0))).conj()
        scale = 1.0 + float(np.max(np.abs(c))) if c.size else 1.0
        if float(np.max(np.abs(c - mirror))) > _HERM_TOL * scale:
            raise ValueError("coefficients violate Hermitian symmetry")
        c = 0.5 * (c + mirror)
        object.__setattr__(self, "coeffs", c)
        flat = c.reshape(c.shape[: -self.d] + (-1,))
        nz = np.flatnonzero(np.any(flat != 0, axis=tuple(range(flat.ndim - 1))))
        if nz.size == 0:
            nz = np.array([flat.shape[-1] // 2])
        object.__setattr__(self, "_nz", nz)
        object.__setattr__(self, "_nz_modes", _lattice(self.d, self.N)[nz])
        object.__setattr__(self, "_nz_coeffs", flat[..., nz])
        # real evaluation path: value = c0 + 2 Re sum_{k in half-space} c_k e^{i theta}
        m = self._nz_modes
        first = np.zeros(m.shape[0], dtype=int)
        for j in range(self.d):
            first = np.where(first != 0, first, m[:, j])
        half = first > 0
        cf_half = self._nz_coeffs[..., half]
        center = flat.shape[-1] // 2
        object.__setattr__(self, "_half_modes", m[half])
        object.__setattr__(self, "_half_cos", 2.0 * cf_half.real)
        object.__setattr__(self, "_half_sin", -2.0 * cf_half.imag)
        object.__setattr__(self, "_c0", flat[..., center].real)

    @property
    def comp_shape(self) -> tuple[int, ...]:
        return self.coeffs.shape[: -self.d]

    @property
    def is_constant(self) -> bool:
        return self._half_modes.shape[0] == 0

    def modes(self) -> np.ndarray:
        return _lattice(self.d, self.N)

    def flat_coeffs(self) -> np.ndarray:
        return self.coeffs.reshape(self.comp_shape + (-1,))

    def evaluate_complex(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise ValueError(f"points have dimension {x.shape[-1]}, field has {self.d}")
        batch = x.shape[:-1]
        pts = x.reshape(-1, self.d)
        n, M = pts.shape[0], self._nz_modes.shape[0]
        cf = self._nz_coeffs.reshape(-1, M)
        out = np.empty((n, cf.shape[0]), dtype=complex)
        step = max(1, _EVAL_CHUNK // max(M, 1))
        for lo in range(0, n, step):
            ph = np.exp(
                (TWO_PI * 1j) * (pts[lo : lo + step] @ self._nz_modes.T)
            )
            out[lo : lo + step] = ph @ cf.T
        return out.reshape(batch + self.comp_shape)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise ValueError(f"points have dimension {x.shape[-1]}, field has {self.d}")
        batch = x.shape[:-1]
        pts = x.reshape(-1, self.d)
        mh = self._half_modes
        n, M = pts.shape[0], mh.shape[0]
        if M == 0:
            out = np.broadcast_to(self._c0, (n,) + self._c0.shape).reshape(
                batch + self.comp_shape
            )
            return out.copy()
        wc = self._half_cos.reshape(-1, M)
        ws = self._half_sin.reshape(-1, M)
        out = np.empty((n, wc.shape[0]))
        step = max(1, _EVAL_CHUNK // M)
        for lo in range(0, n, step):
            theta = TWO_PI * (pts[lo : lo + step] @ mh.T)
            out[lo : lo + step] = np.cos(theta) @ wc.T + np.sin(theta) @ ws.T
        out += self._c0.reshape(-1)
        return out.reshape(batch + self.comp_shape)

    # -- algebra -----------------------------------------------------------

    def _with(self, coeffs) -> "FourierField":
        return FourierField(self.d, self.N, coeffs)

    def add_constant(self, value) -> "FourierField":
        """Field plus a constant of the same component shape."""
        value = np.asarray(value, dtype=float)
        c = self.coeffs.copy()
        zero = (self.N,) * self.d
        c[(...,) + zero] = c[(...,) + zero] + value
        return self._with(c)

    def __add__(self, other: "FourierField") -> "FourierField":
        a, b = _common_band(self, other)
        return a._with(a.coeffs + b.coeffs)

    def __sub__(self, other: "FourierField") -> "FourierField":
        a, b = _common_band(self, other)
        return a._with(a.coeffs - b.coeffs)

    def __mul__(self, scalar) -> "FourierField":
        return self._with(self.coeffs * float(scalar))

    __rmul__ = __mul__

    def derivative(self, axis: int) -> "FourierField":
        shape = [1] * self.d
        shape[axis] = 2 * self.N + 1
        fac = (TWO_PI * 1j) * np.arange(-self.N, self.N + 1).reshape(shape)
        return self._with(self.coeffs * fac)

    def gradient(self) -> "FourierField":
        """Stack of partials as a new trailing component axis."""
        nc = len(self.comp_shape)
        stack = np.stack(
            [self.derivative(j).coeffs for j in range(self.d)], axis=nc
        )
        return FourierField(self.d, self.N, stack)

    def mean(self) -> np.ndarray:
        zero = (self.N,) * self.d
        return np.real(self.coeffs[(...,) + zero])

    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.coeffs.ravel()))

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        cf = self.coeffs.reshape((-1,) + (2 * self.N + 1,) * self.d)
        cf = cf.reshape(cf.shape[0], -1)
        modes = _lattice(self.d, self.N)
        keep = np.flatnonzero(np.any(cf != 0, axis=0))
        entries = []
        for idx in keep:
            entries.append(
                [
                    [int(k) for k in modes[idx]],
                    [[float(z.real), float(z.imag)] for z in cf[:, idx]],
                ]
            )
        return {
            "d": self.d,
            "N": self.N,
            "comp_shape": list(self.comp_shape),
            "entries": entries,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FourierField":
        d, N = int(data["d"]), int(data["N"])
        comp = tuple(int(s) for s in data["comp_shape"])
        ncomp = int(np.prod(comp)) if comp else 1
        M = (2 * N + 1) ** d
        cf = np.zeros((ncomp, M), dtype=complex)
        for k_list, vals in data["entries"]:
            shifted = tuple(int(k) + N for k in k_list)
            idx = int(np.ravel_multi_index(shifted, (2 * N + 1,) * d))
            cf[:, idx] = [complex(re, im) for re, im in vals]
        return cls(d, N, cf.reshape(comp + (2 * N + 1,) * d))


def _embed(f: FourierField, N: int) -> FourierField:
    if f.N == N:
        return f
    if f.N > N:
        raise ValueError("cannot embed into a smaller band")
    pad = N - f.N
    width = [(0, 0)] * (f.coeffs.ndim - f.d) + [(pad, pad)] * f.d
    return FourierField(f.d, N, np.pad(f.coeffs, width))


def _common_band(a: FourierField, b: FourierField):
    if a.d != b.d:
        raise ValueError("fields live on tori of different dimension")
    if a.comp_shape != b.comp_shape:
        raise ValueError("component shapes differ")
    N = max(a.N, b.N)
    return _embed(a, N), _embed(b, N)


# ---------------------------------------------------------------------------
# builders


def harmonic_field(d: int, terms: dict, kind: str = "sin") -> FourierField:
    """Scalar field sum of c * sin/cos(2 pi k.x) terms plus a constant.

    Keys are integer mode tuples, padded with zeros to length d; the empty
    tuple (or all-zero key) contributes the plain constant either way.
    """
    if kind not in ("sin", "cos"):
        raise ValueError("kind must be 'sin' or 'cos'")
    ks = []
    for key in terms:
        kt = tuple(int(v) for v in key)
        if len(kt) > d:
            raise ValueError(f"mode {key} has more entries than dimensions")
        ks.append(kt + (0,) * (d - len(kt)))
    N = max([max(abs(v) for v in k) if any(k) else 0 for k in ks], default=0)
    N = max(N, 0)
    shape = (2 * N + 1,) * d
    c = np.zeros(shape, dtype=complex)
    for key, k in zip(terms, ks):
        amp = float(terms[key])
        if not any(k):
            c[tuple(N for _ in range(d))] += amp
            continue
        plus = tuple(v + N for v in k)
        minus = tuple(-v + N for v in k)
        if kind == "sin":
            c[plus] += amp / 2j
            c[minus] += -amp / 2j
        else:
            c[plus] += amp / 2
            c[minus] += amp / 2
    return FourierField(d, N, c)


def identity_matrix_field(d: int) -> FourierField:
    c = np.zeros((d, d) + (1,) * d, dtype=complex)
    for i in range(d):
        c[(i, i) + (0,) * d] = 1.0
    return FourierField(d, 0, c)


def shear_field(beta: float) -> FourierField:
    """d=2 divergence-free drift (beta sin(2 pi x2), 0)."""
    c = np.zeros((2, 3, 3), dtype=complex)
    c[0, 1, 2] = float(beta) / 2j  # k = (0, 1)
    c[0, 1, 0] = -float(beta) / 2j  # k = (0, -1)
    return FourierField(2, 1, c)


def sqrt_diffusion(a_field: FourierField, x) -> np.ndarray:
    """Pointwise PSD square root of the diffusion matrix, shape (..., d, d).

    A scalar field is read as a(x) I on its own torus dimension.
    """
    d = a_field.d
    vals = a_field(x)
    if a_field.comp_shape == ():
        if np.min(vals) <= 0:
            raise ValueError("scalar diffusion is not uniformly positive")
        return np.sqrt(vals)[..., None, None] * np.eye(d)
    if a_field.comp_shape != (d, d):
        raise ValueError("diffusion field must be scalar or (d, d)")
    sym = 0.5 * (vals + np.swapaxes(vals, -1, -2))
    if np.max(np.abs(vals - sym)) > 1e-10 * (1.0 + np.max(np.abs(vals))):
        raise ValueError("diffusion matrix field is not symmetric")
    w, V = np.linalg.eigh(sym)
    if np.min(w) <= 0:
        raise ValueError("diffusion matrix is not uniformly positive definite")
    return np.einsum("...ik,...k,...jk->...ij", V, np.sqrt(w), V)


def _coeff_lookup(f: FourierField, modes: np.ndarray) -> np.ndarray:
    """Coefficients of f at the given integer modes (zero outside band)."""
    inside = np.all(np.abs(modes) <= f.N, axis=-1)
    shifted = np.clip(modes + f.N, 0, 2 * f.N)
    idx = np.ravel_multi_index(
        tuple(shifted[..., j] for j in range(f.d)), (2 * f.N + 1,) * f.d
    )
    flat = f.flat_coeffs()
    out = flat[..., idx]
    return np.where(inside, out, 0.0)


def weighted_average(f: FourierField, mu: FourierField) -> np.ndarray:
    """int f dmu for band-limited f and mu, exact via the convolution zero mode."""
    if f.d != mu.d:
        raise ValueError("field and density dimensions differ")
    mu_at = _coeff_lookup(mu, -f.modes())
    total = np.einsum("...m,m->...", f.flat_coeffs(), mu_at)
    return np.real_if_close(total).real


def eval_vector(f: FourierField, x) -> np.ndarray:
    """Evaluate as a vector field of shape (..., d), promoting d=1 scalars."""
    vals = f(x)
    if f.comp_shape == ():
        if f.d != 1:
            raise ValueError("scalar field on a d>1 torus is not a vector field")
        return vals[..., None]
    if f.comp_shape != (f.d,):
        raise ValueError(f"component shape {f.comp_shape} is not a vector")
    return vals


# ---------------------------------------------------------------------------
# spectral generator


def _conv_matrix(f: FourierField, comp: tuple, modes: np.ndarray) -> np.ndarray:
    """Dense matrix of multiplication by one component, re-truncated."""
    flat = f.flat_coeffs()[comp] if comp else f.flat_coeffs()
    full = FourierField(f.d, f.N, flat.reshape((2 * f.N + 1,) * f.d))
    diff = modes[:, None, :] - modes[None, :, :]
    return _coeff_lookup(full, diff)


def generator_matrix(a: FourierField, b: FourierField, N: int) -> np.ndarray:
    """Dense matrix of L0 = a : grad^2 + b . grad on the N-lattice.

    Products are re-truncated at N, which makes the matrix adjoint of the
    truncated operator equal to the conjugate transpose.
    """
    d = a.d
    modes = _lattice(d, N)
    M = modes.shape[0]
    D = (TWO_PI * 1j) * modes.T  # (d, M) diagonal derivative factors
    L = np.zeros((M, M), dtype=complex)
    scalar_a = a.comp_shape == ()
    for i in range(d):
        for j in range(d):
            if scalar_a:
                if i != j:
                    continue
                Ta = _conv_matrix(a, (), modes)
            else:
                Ta = _conv_matrix(a, (i, j), modes)
            if not np.any(Ta):
                continue
            L += Ta * (D[i] * D[j])[None, :]
    if b.comp_shape == (d,):
        b_comp = [(i,) for i in range(d)]
    elif b.comp_shape == () and d == 1:
        b_comp = [()]
    else:
        raise ValueError("drift field must be a vector (or scalar when d=1)")
    for i in range(d):
        Tb = _conv_matrix(b, b_comp[i], modes)
        if not np.any(Tb):
            continue
        L += Tb * D[i][None, :]
    return L


def invariant_density_torus(
    a: FourierField, b: FourierField, cutoff: int
) -> FourierField:
    """Invariant density of L0 on the torus, normalized to unit mass.

    Solves the conjugate-transpose system with the zero-mode row replaced
    by the normalization; non-negativity is checked on a 2N+1 grid.
    """
    d, N = a.d, int(cutoff)
    L = generator_matrix(a, b, N)
    modes = _lattice(d, N)
    M = modes.shape[0]
    i0 = M // 2
    Lh = L.conj().T
    if np.max(np.abs(Lh[i0])) > 1e-9 * (1.0 + np.max(np.abs(Lh))):
        raise RuntimeError("zero-mode row of the adjoint is not degenerate")
    Lh[i0] = 0.0
    Lh[i0, i0] = 1.0
    rhs = np.zeros(M, dtype=complex)
    rhs[i0] = 1.0
    try:
        mu_hat = np.linalg.solve(Lh, rhs)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"invariant-density system is singular: {exc}") from exc
    mu = FourierField(d, N, mu_hat.reshape((2 * N + 1,) * d))
    grid = uniform_grid(d, 2 * N + 1)
    lo = float(np.min(mu(grid)))
    if lo < -1e-8:
        raise RuntimeError(
            f"invariant density dips to {lo:.3e} on the check grid; "
            "increase the cutoff"
        )
    return mu


def cell_problem_torus(
    a: FourierField,
    b: FourierField,
    rhs: FourierField,
    mu: FourierField,
    cutoff: int,
):
    """Solve L0 Phi = -rhs with mu-centering; returns (Phi, diagnostics).

    The right-hand side must be centered: |int rhs dmu| <= 1e-10 per
    component, which is exactly the solvability condition of the truncated
    system.  The residual is checked against 1e-8 ||rhs||.
    """
    d, N = a.d, int(cutoff)
    L = generator_matrix(a, b, N)
    M = L.shape[0]
    comp = rhs.comp_shape
    r = _coeff_lookup(rhs, _lattice(d, N)).reshape(-1, M)
    fred = np.abs(np.atleast_1d(weighted_average(rhs, mu)).ravel())
    scale = 1.0 + np.linalg.norm(r, axis=-1)
    if np.any(fred > 1e-10 * scale):
        raise ValueError(
            f"right-hand side is not centered under mu "
            f"(max |int rhs dmu| = {np.max(fred):.3e})"
        )
    sol, *_ = np.linalg.lstsq(L, -r.T, rcond=None)
    resid = np.linalg.norm(L @ sol + r.T, axis=0)
    rnorm = np.linalg.norm(r, axis=-1)
    bad = resid > 1e-8 * np.maximum(rnorm, 1e-12)
    if np.any(bad):
        raise RuntimeError(
            f"cell-problem residual {np.max(resid):.3e} exceeds tolerance"
        )
    phi_flat = sol.T  # (ncomp, M)
    phi = FourierField(d, N, phi_flat.reshape(comp + ((2 * N + 1,) * d)))
    shift = np.atleast_1d(weighted_average(phi, mu))
    phi = phi.add_constant(-shift.reshape(comp) if comp else -float(shift[0]))
    diagnostics = {
        "residual": float(np.max(resid)),
        "fredholm": float(np.max(fred)),
    }
    return phi, diagnostics


# ---------------------------------------------------------------------------
# homogenized coefficients


@dataclass(frozen=True)
class TorusHomogData:
    """Invariant density, corrector, and homogenized drift/diffusion."""

    d: int
    cutoff: int
    mu: FourierField
    b_bar: np.ndarray
    phi: FourierField
    F: np.ndarray
    G: np.ndarray
    sqrtG: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        G = np.asarray(self.G, dtype=float)
        if np.max(np.abs(G - G.T)) > 1e-10 * (1.0 + np.max(np.abs(G))):
            raise ValueError("homogenized diffusion is not symmetric")
        if np.min(np.linalg.eigvalsh(G)) <= 0:
            raise ValueError("homogenized diffusion is not positive definite")
        center = np.max(np.abs(np.atleast_1d(weighted_average(self.phi, self.mu))))
        if center > 1e-10:
            raise ValueError("corrector is not centered under mu")


def effective_torus(a: FourierField, b, c, cutoff: int) -> TorusHomogData:
    """Homogenized data for dX = eps^-1 b(X/eps) dt + c dt + sqrt(2) sigma dW."""
    d, N = a.d, int(cutoff)
    if b is None:
        b = harmonic_field(d, {(): 0.0})
    mu = invariant_density_torus(a, b, N)
    if b.comp_shape == () and d == 1:
        bvec = FourierField(d, b.N, b.coeffs[None])
    elif b.comp_shape == (d,):
        bvec = b
    else:
        raise ValueError("drift must be a vector field (or scalar when d=1)")
    b_bar = np.atleast_1d(weighted_average(bvec, mu))
    btil = bvec.add_constant(-b_bar)
    phi, cell_diag = cell_problem_torus(a, b, btil, mu, N)

    P = 4 * N + 4
    grid = uniform_grid(d, P)
    K = np.broadcast_to(np.eye(d), (grid.shape[0], d, d)) + phi.gradient()(grid)
    if a.comp_shape == ():
        a_mat = a(grid)[..., None, None] * np.eye(d)
    else:
        a_mat = a(grid)
    mu_vals = mu(grid)
    if isinstance(c, FourierField):
        c_vals = eval_vector(c, grid)
    else:
        c_vals = np.broadcast_to(np.asarray(c, dtype=float), (grid.shape[0], d))
    wsum = float(np.mean(mu_vals))
    F = np.einsum("nik,nk,n->i", K, c_vals, mu_vals) / grid.shape[0]
    G = np.einsum("nik,nkl,njl,n->ij", K, a_mat, K, mu_vals) / grid.shape[0]
    G = 0.5 * (G + G.T)
    from .effective import psd_sqrt

    diagnostics = dict(cell_diag)
    diagnostics["mu_grid_mass"] = wsum
    diagnostics["mu_min"] = float(np.min(mu_vals))
    return TorusHomogData(
        d=d,
        cutoff=N,
        mu=mu,
        b_bar=b_bar,
        phi=phi,
        F=F,
        G=G,
        sqrtG=psd_sqrt(G),
        diagnostics=diagnostics,
    )


def gaussian_fourier_reference(phi: FourierField, F, G, y0, t) -> np.ndarray:
    """E phi(y0 + F t + sqrt(2 G) W_t) for a band-limited observable.

    Each mode decays like exp(-4 pi^2 k.Gk t) around the transported phase.
    """
    F = np.atleast_1d(np.asarray(F, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    t = np.asarray(t, dtype=float)
    k = phi._nz_modes
    cf = phi._nz_coeffs
    if phi.comp_shape != ():
        raise ValueError("observable must be scalar")
    phase = TWO_PI * 1j * (k @ y0 + np.multiply.outer(t, k @ F))
    decay = (TWO_PI**2) * np.einsum("mi,ij,mj->m", k, G, k)
    vals = np.sum(cf * np.exp(phase - np.multiply.outer(t, decay)), axis=-1)
    return vals.real


def torus_uniform_error(
    sys,
    phi: FourierField,
    eps_grid,
    t_grid,
    n_paths: int,
    stream: RngStream,
    x0=None,
    dt_factor: float = 20.0,
    x0_rows=None,
    chart0=None,
    dt_schedule=None,
):
    """Uniform-in-time weak error of the centered slow variable vs the limit.

    The pair system carries the fast chart X/eps and the centered slow
    variable Y = X - t b_bar / eps; the reference law of the limit is the
    exact Gaussian-Fourier formula, so the only statistical error is on
    the multiscale side.  Brownian increments are shared across the eps
    grid through nested refinement of a common fine grid.

    x0_rows gives one slow start per eps (default: x0 for every row).
    chart0 pins the fast chart start; each x0_rows[i] / eps must then sit
    an integer away from chart0 per component, so the chart relation
    x = X / eps survives modulo the period.  Per-eps starts matched this
    way keep the corrector phase, and with it the leading error term,
    identical across the ladder.

    dt_schedule, a sequence of (t_end, factor) pairs covering (0, T],
    refines the step near t=0 and coarsens it once the observable gap has
    decayed; the last t_end may be None.  Interior t_end values must be
    output times (the handoff needs the full state there).  Each zone
    reuses the shared-increment ladder, so common random numbers hold
    across eps within every zone.
    """
    from .convergence import ConvergenceReport, fit_rate, refine_ladder
    from .engine import integrate_multiscale_ladder

    md = sys.metadata
    for key in ("a_modes", "b_modes", "c_const", "cutoff"):
        if key not in md:
            raise ValueError("system does not carry periodic homogenization data")
    data = md.get("_torus_effective")
    if data is None:
        data = effective_torus(
            md["a_modes"], md["b_modes"], md["c_const"], md["cutoff"]
        )
        md["_torus_effective"] = data
    eps_grid = np.asarray(eps_grid, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    if x0_rows is not None:
        if len(x0_rows) != eps_grid.size:
            raise ValueError("x0_rows must hold one slow start per eps")
        x0_rows = [np.atleast_1d(np.asarray(v, dtype=float)) for v in x0_rows]
    else:
        x0 = np.zeros(sys.d) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
        x0_rows = [x0] * eps_grid.size

    starts = []
    for e, xr in zip(eps_grid, x0_rows):
        chart = xr / float(e)
        if chart0 is not None:
            c0 = np.broadcast_to(np.asarray(chart0, dtype=float), (sys.d,))
            winding = chart - c0
            if np.max(np.abs(winding - np.round(winding))) > 1e-9:
                raise ValueError(
                    "x0 / eps must equal chart0 modulo 1 for every eps row"
                )
            chart = c0
        starts.append(np.concatenate([chart, xr]))

    if dt_schedule is None:
        dt_schedule = ((None, dt_factor),)
    zones = []
    t_start = 0.0
    remaining = list(t_grid)
    for t_end, factor in dt_schedule:
        if t_end is None or t_end >= t_grid[-1]:
            ts = [t for t in remaining if t > t_start]
        else:
            ts = [t for t in remaining if t_start < t <= t_end]
            if not ts or abs(ts[-1] - t_end) > 1e-12:
                raise ValueError("interior dt_schedule breaks must be output times")
        if ts:
            zones.append((t_start, np.asarray(ts), float(factor)))
            t_start = ts[-1]
    if not zones or abs(zones[-1][1][-1] - t_grid[-1]) > 1e-12:
        raise ValueError("dt_schedule must cover the whole output grid")

    refs = np.stack(
        [gaussian_fourier_reference(phi, data.F, data.G, xr, t_grid)
         for xr in x0_rows]
    )
    errors = np.zeros((eps_grid.size, t_grid.size))
    stderrs = np.zeros_like(errors)
    failed = [np.zeros(n_paths, dtype=bool) for _ in range(eps_grid.size)]
    col = 0
    for zone_idx, (t0, ts_abs, factor) in enumerate(zones):
        ts_rel = ts_abs - t0
        dts, refines = refine_ladder(eps_grid, ts_rel, factor)
        ensembles = integrate_multiscale_ladder(
            sys, eps_grid, dts, refines, starts[0], ts_rel, n_paths,
            stream.child(60 + zone_idx), scheme="euler", z0_rows=starts,
            allow_coarse_dt=True,
        )
        for i, ens in enumerate(ensembles):
            failed[i] |= ens.failed
            _, y = ens.split()
            vals = phi(y[~failed[i]][:, 1:, :])
            n = vals.shape[0]
            mean = np.mean(vals, axis=0)
            se = np.std(vals, axis=0, ddof=1) / np.sqrt(n)
            sl = slice(col, col + ts_abs.size)
            errors[i, sl] = np.abs(mean - refs[i, sl])
            stderrs[i, sl] = se
        starts = [ens.states[:, -1, :] for ens in ensembles]
        col += ts_abs.size
    sup_idx = np.argmax(errors, axis=1)
    rows = np.arange(eps_grid.size)
    fit = fit_rate(
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
        rate=fit,
        meta={
            "observable": "fourier",
            "dt_factor": dt_factor,
            "dt_schedule": [[float(z[1][-1]), float(z[2])] for z in zones],
            "n_paths": n_paths,
            "seed": stream.seed,
            "b_bar": [float(v) for v in data.b_bar],
            "x0_rows": [[float(v) for v in xr] for xr in x0_rows],
            "chart0": None if chart0 is None else
                [float(v) for v in np.broadcast_to(np.asarray(chart0, dtype=float), (sys.d,))],
        },
    )


# ---------------------------------------------------------------------------
# Zvonkin regularization


@dataclass(frozen=True)
class ZvonkinTransform:
    """Resolvent solution u of Delta u - lambda u + b . grad u = f."""

    lam: float
    u: FourierField
    grad_sup: float
    u_sup: float
    contraction: float
    residual: float
    history: tuple
    meta: dict = field(default_factory=dict)


def _divergence_residual(b: FourierField) -> float:
    modes = b.modes()
    cf = b.flat_coeffs()
    div = np.einsum("im,mi->m", cf, modes) if b.comp_shape else None
    if div is None:
        raise ValueError("drift must be a vector field")
    scale = 1.0 + float(np.max(np.abs(cf)))
    return float(np.max(np.abs(div))) / scale


def _grad_sup(u: FourierField, P: int) -> float:
    grid = uniform_grid(u.d, P)
    gv = u.gradient()(grid)
    return float(np.max(np.linalg.svd(gv, compute_uv=False)))


def zvonkin_solve(
    b: FourierField,
    f: FourierField,
    lam: float = 16.0,
    tol: float = 1e-10,
    grad_bound: float = 0.5,
    max_doublings: int = 5,
    max_iters: int = 400,
) -> ZvonkinTransform:
    """Fixed-point resolvent solve with lambda doubled until grad u is small.

    Requires an exactly divergence-free drift (spectral check at 1e-12);
    raises if no lambda in the doubling budget meets the gradient bound or
    if the fixed point fails to converge.
    """
    d = b.d
    if b.comp_shape != (d,) or f.comp_shape != (d,):
        raise ValueError("drift and right-hand side must be vector fields")
    if _divergence_residual(b) > 1e-12:
        raise ValueError("drift is not divergence-free")
    N = max(b.N, f.N)
    modes = _lattice(d, N)
    M = modes.shape[0]
    D = (TWO_PI * 1j) * modes.T
    Bmat = np.zeros((M, M), dtype=complex)
    for i in range(d):
        Bmat += _conv_matrix(_embed(b, N), (i,), modes) * D[i][None, :]
    lap = -(TWO_PI**2) * np.sum(modes**2, axis=1)
    fhat = _coeff_lookup(_embed(f, N), modes).T  # (M, d)
    fnorm = np.linalg.norm(fhat)
    P = 4 * N + 4

    history = []
    lam_k = float(lam)
    for attempt in range(max_doublings + 1):
        rl = 1.0 / (lap - lam_k)
        u = rl[:, None] * fhat
        q = np.inf
        prev_diff = None
        converged = False
        for _ in range(max_iters):
            u_new = rl[:, None] * (fhat - Bmat @ u)
            diff = float(np.linalg.norm(u_new - u))
            u = u_new
            if prev_diff is not None and prev_diff > 0:
                q = diff / prev_diff
            prev_diff = diff
            if diff <= tol * max(1.0, float(np.linalg.norm(u))):
                converged = True
                break
            if not np.isfinite(diff) or diff > 1e8 * max(1.0, fnorm):
                break
        resid = float(
            np.linalg.norm(lap[:, None] * u - lam_k * u + Bmat @ u - fhat)
        )
        field_u = FourierField(d, N, u.T.reshape((d,) + (2 * N + 1,) * d))
        gsup = _grad_sup(field_u, P)
        usup = float(np.max(np.abs(field_u(uniform_grid(d, P)))))
        history.append(
            {
                "lam": lam_k,
                "converged": converged,
                "grad_sup": gsup,
                "u_sup": usup,
                "contraction": q,
                "residual": resid,
            }
        )
        if converged and gsup <= grad_bound:
            if resid > 1e-8 * max(fnorm, 1e-12):
                raise RuntimeError(
                    f"resolvent residual {resid:.3e} exceeds tolerance"
                )
            return ZvonkinTransform(
                lam=lam_k,
                u=field_u,
                grad_sup=gsup,
                u_sup=usup,
                contraction=q,
                residual=resid,
                history=tuple(history),
                meta={"N": N, "tol": tol},
            )
        lam_k *= 2.0
    raise RuntimeError(
        f"no lambda within {max_doublings} doublings of {lam} meets "
        f"grad bound {grad_bound} (last grad_sup "
        f"{history[-1]['grad_sup']:.3f})"
    )


@dataclass(frozen=True)
class ZvonkinSystem:
    """Coefficients pushed through y = x + u(x), tabulated at cutoff 2N."""

    b_hat: FourierField
    c_hat: FourierField
    sigma_hat: FourierField
    roundtrip_error: float
    newton_iters: int


def _newton_inverse(u: FourierField, grad: FourierField, y: np.ndarray):
    x = y.copy()
    iters = 0
    for iters in range(1, 21):
        gap = x + u(x) - y
        if float(np.max(np.abs(gap))) <= 1e-12:
            break
        J = np.broadcast_to(np.eye(u.d), gap.shape[:-1] + (u.d, u.d)) + grad(x)
        x = x - np.linalg.solve(J, gap[..., None])[..., 0]
    return x, iters


def zvonkin_transform_system(
    b: FourierField, c, zv: ZvonkinTransform
) -> ZvonkinSystem:
    """Transformed drift/advection/diffusion for the regularized equation.

    On the image chart: b_hat = lambda u o PhiZ^-1,
    c_hat = (I + grad u) c o PhiZ^-1, sigma_hat = (I + grad u) o PhiZ^-1,
    with PhiZ(x) = x + u(x) inverted by Newton on the projection grid.
    """
    u = zv.u
    d, N2 = u.d, 2 * u.N
    grad = u.gradient()
    P = max(3 * N2, 2 * N2 + 2)
    grid = uniform_grid(d, P)
    x_pre, iters = _newton_inverse(u, grad, grid)
    round_trip = float(np.max(np.abs(x_pre + u(x_pre) - grid)))
    if round_trip > 1e-10:
        raise RuntimeError(f"Newton inverse round-trip error {round_trip:.3e}")
    gu = grad(x_pre)
    K = np.broadcast_to(np.eye(d), gu.shape) + gu
    if isinstance(c, FourierField):
        c_vals = eval_vector(c, x_pre)
    else:
        c_vals = np.broadcast_to(np.asarray(c, dtype=float), (grid.shape[0], d))
    tables = {
        "b": zv.lam * u(x_pre),
        "c": np.einsum("nik,nk->ni", K, c_vals),
        "sigma": K,
    }
    fields = {}
    for name, vals in tables.items():
        comp = vals.shape[1:]
        grids = vals.reshape((P,) * d + comp)
        grids = np.moveaxis(grids, tuple(range(d)), tuple(range(-d, 0)))
        spec = np.fft.fftn(grids, axes=tuple(range(-d, 0))) / P**d
        spec = np.fft.fftshift(spec, axes=tuple(range(-d, 0)))
        mid = P // 2
        sl = (slice(None),) * len(comp) + tuple(
            slice(mid - N2, mid + N2 + 1) for _ in range(d)
        )
        fields[name] = FourierField(d, N2, spec[sl])
    return ZvonkinSystem(
        b_hat=fields["b"],
        c_hat=fields["c"],
        sigma_hat=fields["sigma"],
        roundtrip_error=round_trip,
        newton_iters=iters,
    )


def synth_divergence_free_drift(
    d: int, alpha: float, N: int, amplitude: float = 1.0, seed: int = 0
) -> FourierField:
    """Random divergence-free drift with |b_k| = amplitude |k|^-(alpha + d/2).

    Directions are Gaussian draws projected onto k-perp and renormalized,
    so both the magnitude law and k . b_k = 0 hold exactly.  Needs d >= 2:
    a one-dimensional divergence-free periodic field is constant.
    """
    if d < 2:
        raise ValueError("divergence-free synthesis needs d >= 2")
    if not -1.0 < alpha < 0.0:
        raise ValueError("roughness exponent alpha must lie in (-1, 0)")
    gen = RngStream(int(seed), 0).generator()
    modes = _lattice(d, N)
    c = np.zeros((d, (2 * N + 1) ** d), dtype=complex)
    half = [
        idx
        for idx, k in enumerate(modes)
        if any(k) and (k[np.nonzero(k)[0][0]] > 0)
    ]
    draws = gen.standard_normal((len(half), d, 2))
    for row, idx in enumerate(half):
        k = modes[idx].astype(float)
        g = draws[row, :, 0] + 1j * draws[row, :, 1]
        proj = g - k * (k @ g) / (k @ k)
        if np.linalg.norm(proj) < 1e-12:
            e = np.zeros(d)
            e[int(np.argmin(np.abs(k)))] = 1.0
            proj = e - k * (k @ e) / (k @ k)
        target = float(amplitude) * np.linalg.norm(k) ** (-(alpha + d / 2))
        bk = proj / np.linalg.norm(proj) * target
        c[:, idx] = bk
        mirror = int(np.ravel_multi_index(tuple(-modes[idx] + N), (2 * N + 1,) * d))
        c[:, mirror] = bk.conj()
    return FourierField(d, N, c.reshape((d,) + (2 * N + 1,) * d))
