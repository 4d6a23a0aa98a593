"""Batch front door: config-driven experiment runs with persisted artifacts.

Every run is fully determined by its JSON config (master seed included; no
wall-clock seeding anywhere).  ``run_experiment`` resolves the config
against per-kind defaults, rejects unknown keys by name, runs the named
pipeline, and leaves behind an artifact directory:

    config.resolved.json   fully defaulted echo of the config
    *.csv                  result tables (17-significant-digit floats)
    summary.json           pass/fail per check invoked

The process exit code is 0 exactly when every invoked check passed.
Reruns with an identical config produce bit-identical CSV files.  The
environment variable HOMOSCALE_THREADS caps worker threads for per-eps
jobs; results merge deterministically either way.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import serialize
from .rng import RngStream
from .systems import ConfigError

KINDS = ("validate", "converge", "stationary", "kramers", "torus", "zvonkin")

_COMMON_KEYS = {"kind", "preset", "preset_params", "seed", "out_dir", "label"}
_KIND_KEYS = {
    "validate": {"y0"},
    "converge": {
        "observable", "eps_grid", "t_grid", "n_paths", "n_hom", "scheme",
        "dt_factor", "hom_dt", "z0", "rate_window",
        "layer_eps", "layer_t_grid", "layer_observable", "layer_n_paths",
    },
    "stationary": {
        "observable", "eps", "T", "n_paths", "burn", "n_times", "z0",
        "gap_se_factor", "eps_grid",
    },
    "kramers": {
        "eps", "v0", "y0", "t_grid", "n_paths", "dt", "gap_tol",
        "gap_se_factor", "layer_skip",
    },
    "torus": {
        "observable", "eps_grid", "t_grid", "n_paths", "dt_factor",
        "rate_window", "x0", "x0_rows", "chart0", "dt_schedule",
    },
    "zvonkin": {
        "d", "alpha", "cutoff", "amplitude", "lam0", "grad_bound", "tol",
    },
}

_DEFAULTS = {
    "validate": {"preset": "averaging-ou", "y0": None},
    "converge": {
        "preset": "averaging-ou",
        "observable": "tanh_y1",
        "eps_grid": [0.4, 0.2, 0.1, 0.05],
        "t_grid": [0.5, 1.0, 2.0, 4.0, 8.0, 14.0, 20.0],
        "n_paths": 50000,
        "n_hom": None,
        "scheme": "auto",
        "dt_factor": 8.0,
        "hom_dt": None,
        "z0": [0.0, 1.5],
        "rate_window": [0.7, 1.3],
        "layer_eps": None,
        "layer_t_grid": None,
        "layer_observable": "x1",
        "layer_n_paths": 20000,
    },
    "stationary": {
        "preset": "averaging-ou",
        "observable": "y1_sq",
        "eps": 0.2,
        "eps_grid": None,
        "T": 40.0,
        "n_paths": 2000,
        "burn": 0.5,
        "n_times": 64,
        "z0": None,
        "gap_se_factor": 5.0,
    },
    "kramers": {
        "preset": "langevin-scalar",
        "eps": 0.1,
        "v0": None,
        "y0": None,
        "t_grid": None,
        "n_paths": 10000,
        "dt": None,
        "gap_tol": 0.05,
        "gap_se_factor": 4.0,
        "layer_skip": 10.0,
    },
    "torus": {
        "preset": "torus-1d",
        "preset_params": {"beta": 3.0},
        "observable": "cos",
        "eps_grid": [0.4, 0.2, 0.1, 0.05],
        "t_grid": [0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0],
        "n_paths": 40000,
        "dt_factor": 20.0,
        "dt_schedule": [[0.05, 320.0], [0.2, 80.0], [None, 10.0]],
        "rate_window": [0.7, 1.3],
        "x0": None,
        "x0_rows": [[0.1], [0.65], [0.225], [0.2625]],
        "chart0": 0.25,
    },
    "zvonkin": {
        "preset": None,
        "d": 2,
        "alpha": -0.7,
        "cutoff": 16,
        "amplitude": 1.0,
        "lam0": 16.0,
        "grad_bound": 0.5,
        "tol": 1e-10,
    },
}


class Check:
    """One pass/fail entry of the run summary."""

    def __init__(self, name, passed, value, threshold, detail=""):
        self.name = name
        self.passed = bool(passed)
        self.value = value
        self.threshold = threshold
        self.detail = detail

    def to_dict(self):
        return {
            "name": self.name,
            "passed": self.passed,
            "value": self.value,
            "threshold": self.threshold,
            "detail": self.detail,
        }


def load_config(path: str, kind: str | None = None, seed: int | None = None) -> dict:
    """Parse, key-check, default, and validate one experiment config."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path}: top level must be an object")
    cfg_kind = raw.get("kind", kind)
    if cfg_kind is None:
        raise ConfigError("config has no 'kind' and none was given")
    if kind is not None and cfg_kind != kind:
        raise ConfigError(
            f"config kind {cfg_kind!r} does not match subcommand {kind!r}"
        )
    if cfg_kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {cfg_kind!r}")
    allowed = _COMMON_KEYS | _KIND_KEYS[cfg_kind]
    for key in raw:
        if key not in allowed:
            raise ConfigError(
                f"unknown config key {key!r} for kind {cfg_kind!r}"
            )
    cfg = dict(_DEFAULTS[cfg_kind])
    cfg.update({k: v for k, v in raw.items()})
    cfg["kind"] = cfg_kind
    cfg.setdefault("preset_params", {})
    cfg.setdefault("label", cfg_kind)
    if seed is not None:
        cfg["seed"] = int(seed)
    if "seed" not in cfg:
        raise ConfigError("config must carry a master 'seed' (no wall-clock)")
    cfg["seed"] = int(cfg["seed"])

    eps_grid = cfg.get("eps_grid")
    if eps_grid is not None:
        eps_grid = [float(e) for e in eps_grid]
        if not eps_grid:
            raise ConfigError("eps_grid must not be empty")
        if any(not (0.0 < e < 1.0) for e in eps_grid):
            raise ConfigError("eps values must lie strictly inside (0, 1)")
        if any(b >= a for a, b in zip(eps_grid, eps_grid[1:])):
            raise ConfigError("eps_grid must be strictly decreasing")
        cfg["eps_grid"] = eps_grid
    t_grid = cfg.get("t_grid")
    if t_grid is not None:
        t_grid = [float(t) for t in t_grid]
        if any(t <= 0 for t in t_grid) or any(
            b <= a for a, b in zip(t_grid, t_grid[1:])
        ):
            raise ConfigError("t_grid must be positive and strictly increasing")
        cfg["t_grid"] = t_grid
    return cfg


def _write_summary(out_dir, cfg, checks, error=None):
    ok = all(c.passed for c in checks) and error is None
    payload = {
        "kind": cfg.get("kind"),
        "label": cfg.get("label"),
        "seed": cfg.get("seed"),
        "passed": ok,
        "checks": [c.to_dict() for c in checks],
    }
    if error is not None:
        payload["error"] = str(error)
    serialize.write_json(os.path.join(out_dir, "summary.json"), payload)
    return ok


def _build_preset(cfg):
    from .systems import build_system

    return build_system(
        {"preset": cfg["preset"], "coefficients": cfg.get("preset_params", {})}
    )


# ---------------------------------------------------------------------------
# plot data


def emit_plotdata(report, out_dir: str):
    """Two-column plot files for a finished report object."""
    from .convergence import BoundaryLayerFit, ConvergenceReport
    from .kramers import ThermoCurves

    os.makedirs(out_dir, exist_ok=True)
    written = []
    if isinstance(report, ConvergenceReport):
        if report.eps_grid.size == 0:
            raise ValueError("report has an empty eps grid")
        path = os.path.join(out_dir, "rate_line.csv")
        serialize.write_csv(path, ["log10_eps", "log10_sup_error"],
                            report.sup_rows())
        written.append(path)
    elif isinstance(report, BoundaryLayerFit):
        rows = report.layer_rows()
        if not rows:
            raise ValueError("boundary-layer report has no finite rows")
        path = os.path.join(out_dir, "layer_line.csv")
        serialize.write_csv(path, ["t_over_eps2", "log_error"], rows)
        written.append(path)
    elif isinstance(report, ThermoCurves):
        path = os.path.join(out_dir, f"plot_{report.name}.csv")
        rows = [
            (float(t), float(v), float(r))
            for t, v, r in zip(report.times, report.value, report.reference)
        ]
        serialize.write_csv(path, ["t", "value", "reference"], rows)
        written.append(path)
    else:
        raise TypeError(f"no plot data emitter for {type(report).__name__}")
    return written


# ---------------------------------------------------------------------------
# experiment kinds


def _run_validate(cfg, out_dir):
    from .frozen import centering_residual, frozen_equilibrium

    sys_ = _build_preset(cfg)
    checks = [Check("system-valid", True, 1.0, 1.0, f"preset {sys_.name}")]
    y0 = cfg.get("y0")
    y0 = np.zeros(sys_.vartheta) if y0 is None else np.asarray(y0, dtype=float)
    eq = frozen_equilibrium(sys_, y0, stream=RngStream(cfg["seed"], 2))
    res = centering_residual(sys_, y0, eq)
    tol = 5e-2 if eq.kind == "empirical" else 1e-8
    checks.append(
        Check("frozen-centering", res <= tol, float(res), tol,
              f"||mu_y(H)|| at y0, {eq.kind} equilibrium")
    )
    serialize.write_csv(
        os.path.join(out_dir, "validate.csv"),
        ["check", "value"],
        [("frozen_centering", float(res))],
    )
    return checks


def _run_converge(cfg, out_dir):
    from .convergence import boundary_layer_fit, joint_law_error
    from .presets import observable

    sys_ = _build_preset(cfg)
    phi = observable(cfg["observable"])
    stream = RngStream(cfg["seed"], 0)
    report = joint_law_error(
        sys_, phi, cfg["eps_grid"], cfg["t_grid"], int(cfg["n_paths"]), stream,
        z0=cfg["z0"], n_hom=cfg["n_hom"], dt_factor=float(cfg["dt_factor"]),
        scheme=cfg["scheme"], hom_dt=cfg["hom_dt"],
    )
    serialize.write_csv(
        os.path.join(out_dir, "errors.csv"),
        ["eps", "t", "error", "stderr"],
        report.to_rows(),
    )
    emit_plotdata(report, out_dir)
    serialize.write_json(os.path.join(out_dir, "report.json"), report.to_dict())
    lo, hi = (float(v) for v in cfg["rate_window"])
    checks = [
        Check("rate-in-window", lo <= report.rate.rate <= hi,
              report.rate.rate, [lo, hi],
              f"CI [{report.rate.ci_lo:.3f}, {report.rate.ci_hi:.3f}]")
    ]
    if cfg["layer_eps"] is not None:
        layer = boundary_layer_fit(
            sys_, observable(cfg["layer_observable"]), float(cfg["layer_eps"]),
            cfg["layer_t_grid"], int(cfg["layer_n_paths"]), stream,
        )
        if layer.status == "ok":
            emit_plotdata(layer, out_dir)
        checks.append(
            Check("layer-resolved", layer.status == "ok",
                  layer.kappa if np.isfinite(layer.kappa) else None,
                  None, layer.status)
        )
    return checks


def _run_stationary(cfg, out_dir):
    from .convergence import commutativity_check, stationary_gap
    from .presets import observable

    sys_ = _build_preset(cfg)
    phi = observable(cfg["observable"])
    stream = RngStream(cfg["seed"], 0)
    gap = stationary_gap(
        sys_, phi, float(cfg["eps"]), float(cfg["T"]), int(cfg["n_paths"]),
        stream, z0=cfg["z0"], burn=float(cfg["burn"]),
        n_times=int(cfg["n_times"]),
    )
    rows = [
        ("multiscale_average", gap.value, gap.stderr),
        ("homogenized_average", gap.reference, gap.ref_stderr),
        ("gap", gap.gap, gap.gap_stderr),
    ]
    k = float(cfg["gap_se_factor"])
    checks = [
        Check("stationary-gap", abs(gap.gap) <= k * max(gap.gap_stderr, 1e-300),
              gap.gap, k * gap.gap_stderr,
              f"|avg_ms - avg_hom| vs {k:g} SE")
    ]
    if cfg["eps_grid"]:
        com = commutativity_check(
            sys_, phi, cfg["eps_grid"], float(cfg["T"]), int(cfg["n_paths"]),
            stream, z0=cfg["z0"], burn=float(cfg["burn"]),
            n_times=int(cfg["n_times"]),
        )
        rows.append(("eps_extrapolated_average", com.extrapolated,
                     com.extrapolated_se))
        checks.append(
            Check("commutativity",
                  abs(com.gap) <= k * max(com.gap_stderr, 1e-300),
                  com.gap, k * com.gap_stderr,
                  "iterated limits agree within combined SE")
        )
    serialize.write_csv(
        os.path.join(out_dir, "stationary.csv"),
        ["quantity", "value", "stderr"], rows,
    )
    return checks


def _run_kramers(cfg, out_dir):
    from .kramers import (
        energy_curve,
        entropy_production_curve,
        sk_homogenized,
        sk_simulate,
    )

    sys_ = _build_preset(cfg)
    ls = sys_.metadata.get("langevin_system")
    if ls is None:
        raise ConfigError("kramers experiments need a langevin preset")
    eps = float(cfg["eps"])
    t_grid = cfg["t_grid"]
    if t_grid is None:
        t_grid = [round(0.5 * k, 10) for k in range(1, 41)]
    v0 = np.zeros(ls.d) if cfg["v0"] is None else np.asarray(cfg["v0"], float)
    y0 = np.zeros(ls.d) if cfg["y0"] is None else np.asarray(cfg["y0"], float)
    ens = sk_simulate(ls, eps, v0, y0, t_grid, int(cfg["n_paths"]),
                      RngStream(cfg["seed"], 0), dt=cfg["dt"])
    ref = sk_homogenized(ls, y0, t_grid, int(cfg["n_paths"]),
                         RngStream(cfg["seed"], 1))
    energy = energy_curve(ens, ls, ref)
    entropy = entropy_production_curve(ens, ls, ref)
    checks = []
    post = np.asarray(t_grid) >= float(cfg["layer_skip"]) * eps**2
    tol, kse = float(cfg["gap_tol"]), float(cfg["gap_se_factor"])
    for curve in (energy, entropy):
        serialize.write_csv(
            os.path.join(out_dir, f"{curve.name}.csv"),
            ["t", "value", "stderr", "reference", "ref_stderr"],
            curve.to_rows(),
        )
        emit_plotdata(curve, out_dir)
        allowed = tol * np.abs(curve.reference[post]) + kse * curve.gap_stderr[post]
        worst = np.max(np.abs(curve.gap[post]) - allowed)
        checks.append(
            Check(f"{curve.name}-gap", worst <= 0.0, float(worst), 0.0,
                  f"max over post-layer t of |gap| - ({tol:g} ref + {kse:g} SE)")
        )
    return checks


def _run_torus(cfg, out_dir):
    from . import torus

    sys_ = _build_preset(cfg)
    if cfg["observable"] == "cos":
        phi = torus.harmonic_field(sys_.d, {(1,): 1.0}, kind="cos")
    elif cfg["observable"] == "sin":
        phi = torus.harmonic_field(sys_.d, {(1,): 1.0}, kind="sin")
    else:
        raise ConfigError(
            f"torus observable must be 'cos' or 'sin', got {cfg['observable']!r}"
        )
    schedule = cfg["dt_schedule"]
    if schedule is not None:
        schedule = tuple(
            (None if t_end is None else float(t_end), float(factor))
            for t_end, factor in schedule
        )
    report = torus.torus_uniform_error(
        sys_, phi, cfg["eps_grid"], cfg["t_grid"], int(cfg["n_paths"]),
        RngStream(cfg["seed"], 0), x0=cfg["x0"],
        dt_factor=float(cfg["dt_factor"]),
        x0_rows=cfg["x0_rows"], chart0=cfg["chart0"],
        dt_schedule=schedule,
    )
    serialize.write_csv(
        os.path.join(out_dir, "errors.csv"),
        ["eps", "t", "error", "stderr"],
        report.to_rows(),
    )
    emit_plotdata(report, out_dir)
    data = sys_.metadata["_torus_effective"]
    serialize.write_json(
        os.path.join(out_dir, "effective.json"),
        {
            "b_bar": data.b_bar, "F": data.F, "G": data.G,
            "cutoff": data.cutoff, "diagnostics": data.diagnostics,
            "mu": data.mu.to_dict(), "phi": data.phi.to_dict(),
        },
    )
    lo, hi = (float(v) for v in cfg["rate_window"])
    return [
        Check("rate-in-window", lo <= report.rate.rate <= hi,
              report.rate.rate, [lo, hi],
              f"CI [{report.rate.ci_lo:.3f}, {report.rate.ci_hi:.3f}]")
    ]


def _run_zvonkin(cfg, out_dir):
    from . import torus

    b = torus.synth_divergence_free_drift(
        int(cfg["d"]), float(cfg["alpha"]), int(cfg["cutoff"]),
        amplitude=float(cfg["amplitude"]), seed=cfg["seed"],
    )
    f = -1.0 * b
    zv = torus.zvonkin_solve(
        b, f, lam=float(cfg["lam0"]), tol=float(cfg["tol"]),
        grad_bound=float(cfg["grad_bound"]),
    )
    rows = [
        (h["lam"], 1 if h["converged"] else 0, h["grad_sup"], h["u_sup"],
         h["contraction"], h["residual"])
        for h in zv.history
    ]
    serialize.write_csv(
        os.path.join(out_dir, "zvonkin_history.csv"),
        ["lam", "converged", "grad_sup", "u_sup", "contraction", "residual"],
        rows,
    )
    transformed = torus.zvonkin_transform_system(b, np.zeros(int(cfg["d"])), zv)
    serialize.write_json(
        os.path.join(out_dir, "transformed.json"),
        {
            "lam": zv.lam,
            "roundtrip_error": transformed.roundtrip_error,
            "b_hat": transformed.b_hat.to_dict(),
            "sigma_hat": transformed.sigma_hat.to_dict(),
        },
    )
    fnorm = f.l2_norm()
    sups = [h["u_sup"] for h in zv.history]
    return [
        Check("resolvent-residual", zv.residual <= 1e-8 * fnorm,
              zv.residual, 1e-8 * fnorm, "||Delta u - lam u + b.grad u - f||"),
        Check("contraction", zv.contraction < 1.0, zv.contraction, 1.0,
              "late fixed-point ratio"),
        Check("gradient-bound", zv.grad_sup <= float(cfg["grad_bound"]),
              zv.grad_sup, float(cfg["grad_bound"]), "sup ||grad u||"),
        Check("usup-decreasing",
              all(b <= a * (1 + 1e-9) for a, b in zip(sups, sups[1:])),
              sups, None, "||u||_inf along the lambda schedule"),
    ]


_RUNNERS = {
    "validate": _run_validate,
    "converge": _run_converge,
    "stationary": _run_stationary,
    "kramers": _run_kramers,
    "torus": _run_torus,
    "zvonkin": _run_zvonkin,
}


def run_experiment(config_path: str, out_dir: str | None = None,
                   kind: str | None = None, seed: int | None = None) -> tuple:
    """Run one configured experiment; returns (artifact_dir, passed)."""
    cfg = load_config(config_path, kind=kind, seed=seed)
    if out_dir is None:
        out_dir = cfg.get("out_dir") or os.path.join(
            os.getcwd(), f"homoscale_{cfg['label']}"
        )
    os.makedirs(out_dir, exist_ok=True)
    serialize.write_json(os.path.join(out_dir, "config.resolved.json"), cfg)
    try:
        checks = _RUNNERS[cfg["kind"]](cfg, out_dir)
    except Exception as exc:  # recorded in the summary, nonzero exit
        _write_summary(out_dir, cfg, [], error=exc)
        return out_dir, False
    ok = _write_summary(out_dir, cfg, checks)
    return out_dir, ok


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="homoscale",
        description="multiscale diffusion-approximation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a '{kind}' experiment config")
        p.add_argument("config", help="path to the experiment JSON config")
        p.add_argument("--out", default=None, help="artifact directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's master seed")
    p = sub.add_parser("report", help="re-emit plot files from a finished run")
    p.add_argument("artifact_dir", help="directory containing report.json")

    args = parser.parse_args(argv)
    if args.command == "report":
        return _reemit(args.artifact_dir)
    try:
        _, ok = run_experiment(args.config, out_dir=args.out,
                               kind=args.command, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0 if ok else 1


def _reemit(artifact_dir: str) -> int:
    from .convergence import ConvergenceReport

    path = os.path.join(artifact_dir, "report.json")
    if not os.path.exists(path):
        print(f"no report.json under {artifact_dir}", file=sys.stderr)
        return 2
    with open(path) as fh:
        data = json.load(fh)
    eps = np.asarray(data["eps_grid"], dtype=float)
    sup = np.asarray(data["sup_errors"], dtype=float)
    report = ConvergenceReport(
        eps_grid=eps,
        t_grid=np.zeros(1),
        errors=sup[:, None],
        stderrs=np.zeros((eps.size, 1)),
        meta=data.get("meta", {}),
    )
    emit_plotdata(report, artifact_dir)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
