"""Named, reproducible experiments with serialized reports.

Each run writes a directory ``<out>/<experiment>-<hash>/`` holding the config
echo, one CSV per result table and ``report.json``.  Every assertion is
stored as ``lo <= value <= hi`` so pass/fail can be recomputed offline from
the serialized numbers alone.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

__all__ = [
    "EXPERIMENTS",
    "ExperimentConfig",
    "RunReport",
    "ConfigError",
    "validate_config",
    "config_echo",
    "run",
    "recheck",
    "main",
]

EXPERIMENTS = ("certify", "ledger", "lyapunov", "spectrum", "tube", "lb-gap", "sweep", "weyl", "report")
THREADS_ENV = "POINCARE_LAB_THREADS"

#: oracle values for catalog certificates (closed forms on the declared regions)
CERTIFICATE_ORACLES = {"circle2d": {"nu": 0.75, "nu_eb": 2.0, "g0": 0.1875}}
#: manifold on which each catalog potential is minimized
OPTIMAL_MANIFOLD = {"circle2d": "circle", "ring2d_soft": "circle", "sphere3d": "sphere"}
#: potentials whose minimizers form a positive-dimensional manifold
MANIFOLD_MINIMIZERS = ("circle2d", "sphere3d", "ring2d_soft", "torus3d")


class ConfigError(ValueError):
    """Malformed experiment config; ``errors`` lists every problem with its line."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment request.

    Lists are comma-separated in text configs.  Empty ``eps`` or ``radii``
    select the experiment's defaults.
    """

    experiment: str = "certify"
    potential: str = "circle2d"
    manifold: str = "circle"
    eps: tuple = ()
    radii: tuple = ()
    h: float | None = None
    seed: int = 0
    n_traj: int = 100
    out: str = "runs"

    def content_hash(self) -> str:
        d = asdict(self)
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


_LIST_KEYS = {"eps", "radii"}
_FIELD_TYPES = {"h": float, "seed": int, "n_traj": int}


def _parse_value(key, raw):
    if key in _LIST_KEYS:
        vals = tuple(float(v) for v in raw.split(",") if v.strip())
        bad = [v for v in vals if not (math.isfinite(v) and v > 0)]
        if bad:
            raise ValueError(f"{key} entries must be positive, got {bad[0]:g}")
        return vals
    if key == "h":
        if raw.lower() in ("", "none", "default"):
            return None
        v = float(raw)
        if not v > 0:
            raise ValueError("h must be positive")
        return v
    if key in _FIELD_TYPES:
        v = _FIELD_TYPES[key](raw)
        if key == "n_traj" and v < 1:
            raise ValueError("n_traj must be at least 1")
        return v
    if key == "experiment" and raw not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {raw!r}; choose from {', '.join(EXPERIMENTS)}")
    return raw


def validate_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a config.

    Raises
    ------
    ConfigError
        Listing every malformed line, unknown key or invalid value.
    """
    known = {f.name for f in fields(ExperimentConfig)}
    values, errors = {}, []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value', got {line!r}")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as err:
            errors.append(f"line {lineno}: {key}: {err}")
    if errors:
        raise ConfigError(errors)
    return replace(base or ExperimentConfig(), **values)


def config_echo(cfg: ExperimentConfig) -> str:
    """Config as ``key = value`` text, defaults included, with its content hash."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(f"{x:g}" for x in v)
        lines.append(f"{f.name} = {'' if v is None else v}")
    lines.append(f"# content_hash = {cfg.content_hash()}")
    return "\n".join(lines) + "\n"


def _assert(name, value, lo=None, hi=None):
    value = None if value is None else float(value)
    return {"name": name, "value": value, "lo": lo, "hi": hi, "passed": _holds(value, lo, hi)}


def _holds(value, lo, hi):
    if value is None or not math.isfinite(value):
        return False
    return (lo is None or value >= lo) and (hi is None or value <= hi)


@dataclass
class RunReport:
    experiment: str
    inputs_hash: str
    tables: dict
    assertions: list
    wall_time: float
    stage_errors: list = field(default_factory=list)
    out_dir: str | None = None

    @property
    def passed(self) -> bool:
        return bool(self.assertions) and not self.stage_errors and all(a["passed"] for a in self.assertions)

    def to_dict(self):
        return {
            "experiment": self.experiment, "inputs_hash": self.inputs_hash, "tables": self.tables,
            "assertions": self.assertions, "wall_time": self.wall_time, "stage_errors": self.stage_errors,
            "passed": self.passed,
        }


def recheck(report: dict) -> bool:
    """Recompute the verdict of a serialized report from its numbers."""
    checks = [_holds(a["value"], a["lo"], a["hi"]) for a in report["assertions"]]
    return bool(checks) and not report["stage_errors"] and all(checks)


# --------------------------------------------------------------------------
# pipelines; each returns (tables, assertions)


def _spectrum_h(field, eps, h):
    if h is not None:
        return h
    return np.sqrt(eps) / 8 if field.dim > 1 else np.sqrt(eps) / 32


def _certify(cfg):
    from .constants import build_ledger, ledger_regions
    from .potential import get_potential

    field_ = get_potential(cfg.potential)
    led = build_ledger(field_, ledger_regions(cfg.potential))
    rows = [{"quantity": k, "value": getattr(led, k)} for k in ("nu", "nu_eb", "C_g", "g0")]
    checks = [_assert(f"{r['quantity']} > 0", r["value"], lo=np.finfo(float).tiny) for r in rows]
    for k, v in CERTIFICATE_ORACLES.get(cfg.potential, {}).items():
        checks.append(_assert(f"{k} matches {v:g}", abs(getattr(led, k) - v) / v, hi=1e-3))
    return {"certificates": rows, "provenance": [led.provenance]}, checks


def _ledger(cfg):
    from .constants import build_ledger, epsilon_bounds, ledger_regions
    from .potential import get_potential

    led = build_ledger(get_potential(cfg.potential), ledger_regions(cfg.potential))
    d = led.to_dict()
    rows = [{"quantity": k, "value": v} for k, v in d.items() if isinstance(v, (int, float)) and not isinstance(v, bool)]
    bounds = [{"bound": k, "eps": v} for k, v in epsilon_bounds(led).items()]
    checks = [
        _assert("log10 C_P finite", led.log10_C_P),
        _assert("eps_max > 0", led.eps_max, lo=np.finfo(float).tiny),
    ]
    return {"ledger": rows, "eps_bounds": bounds}, checks


def _lyapunov(cfg):
    from .constants import build_ledger, ledger_regions, verify_lyapunov
    from .potential import get_potential

    field_ = get_potential(cfg.potential)
    led = build_ledger(field_, ledger_regions(cfg.potential))
    rows, checks, viol = [], [], []
    for eps in cfg.eps or (0.001,):
        rep = verify_lyapunov(field_, led, eps, h=cfg.h or 0.01)
        rows.append({"eps": eps, "sigma": rep.sigma, "b": rep.b, "n_nodes": rep.n_nodes,
                     "violations": rep.violation_count, "worst_margin": rep.worst_margin})
        checks.append(_assert(f"violation fraction at eps={eps:g}", rep.violation_count / rep.n_nodes, hi=0.0))
        viol += [dict(zip([f"x{i}" for i in range(field_.dim)] + ["lhs", "rhs", "margin"], map(float, r)), eps=eps)
                 for r in rep.violations]
    return {"lyapunov": rows, "violations": viol}, checks


def _spectrum_rows(cfg, potential, eps_list):
    from .potential import get_potential
    from .spectral import default_generator_domain, generator_spectrum

    field_ = get_potential(potential)
    rows, masks = [], []
    for eps in eps_list:
        dom = default_generator_domain(field_, eps, _spectrum_h(field_, eps, cfg.h))
        spec = generator_spectrum(field_, eps, dom.h[0], m=3, domain=dom)
        row = spec.csv_row({"potential": potential, "eps": eps, "h": spec.h})
        row.update(potential=potential, lambda2=float(spec.eigenvalues[2]), converged=spec.converged)
        rows.append(row)
        masks.append({"name": f"mask-{potential}-eps{eps:g}", "rle": dom.to_rle()})
    return rows, masks


MASKS = "masks"


def _log_slope(eps, values):
    x = 1.0 / np.asarray(eps, float)
    return float(np.polyfit(x, np.log(values), 1)[0])


def _spectrum(cfg):
    eps = cfg.eps or (0.05, 0.02, 0.01)
    rows, masks = _spectrum_rows(cfg, cfg.potential, eps)
    checks = [_assert(f"converged at eps={r['eps']:g}", float(r["converged"]), lo=1.0) for r in rows]
    rho = np.array([r["rho"] for r in rows])
    if cfg.potential in MANIFOLD_MINIMIZERS:
        checks.append(_assert("rho max/min", rho.max() / rho.min(), hi=2.0))
    if cfg.potential.startswith("quadratic"):
        for r in rows:
            checks.append(_assert(f"lambda1 = 1 at eps={r['eps']:g}", abs(r["lambda1"] - 1.0), hi=5e-3))
            checks.append(_assert(f"lambda2 = 2 at eps={r['eps']:g}", abs(r["lambda2"] - 2.0) / 2, hi=5e-3))
    if cfg.potential == "doublewell1d" and len(rows) >= 2:
        checks.append(_assert("slope of log gap vs 1/eps", _log_slope(eps, [r["lambda1"] for r in rows]),
                              lo=-0.275, hi=-0.225))
    return {"spectrum": rows, MASKS: masks}, checks


def _analytic_lb(manifold):
    from .manifold import Circle, Segment, Sphere

    if isinstance(manifold, Circle):
        return 1.0 / manifold.R**2, 2
    if isinstance(manifold, Sphere):
        return 2.0 / manifold.R**2, 3
    if isinstance(manifold, Segment):
        return float(np.pi**2), 1
    return None, None


def _tube(cfg):
    from .manifold import get_manifold
    from .spectral import tube_stability_report

    mf = get_manifold(cfg.manifold)
    ref, _ = _analytic_lb(mf)
    rep = tube_stability_report(mf, cfg.radii or (0.2, 0.1, 0.05, 0.025), lambda_ref=ref)
    rows = [{"radius": r, "h": h, "lambda1": lam, "deviation": abs(lam - rep.lambda_ref),
             "deviation_over_radius": abs(lam - rep.lambda_ref) / (r * rep.lambda_ref)}
            for r, h, lam in zip(rep.radii, rep.h, rep.lambdas)]
    summary = [{k: v for k, v in rep.to_dict().items() if not isinstance(v, list)}]
    checks = [
        _assert("fit R^2", rep.r2, lo=0.95),
        _assert("limit relative error", abs(rep.limit - rep.lambda_ref) / rep.lambda_ref, hi=0.01),
    ]
    return {"tube": rows, "fit": summary}, checks


def _lb_gap(cfg):
    from .manifold import get_manifold
    from .spectral import laplace_beltrami_gap

    mf = get_manifold(cfg.manifold)
    spec = laplace_beltrami_gap(mf)
    ext = spec.extrapolated
    rows = [{"index": i, "eigenvalue": float(v), "extrapolated": float(e), "residual": float(r)}
            for i, (v, e, r) in enumerate(zip(spec.eigenvalues, ext, spec.residuals))]
    ref, mult = _analytic_lb(mf)
    checks = [_assert("lambda0 ~ 0", abs(spec.eigenvalues[0]), hi=1e-8 * max(1.0, spec.lambda1))]
    if ref is not None:
        checks.append(_assert("lambda1 relative error", abs(spec.lambda1 - ref) / ref, hi=2e-3))
        checks.append(_assert("lambda1 multiplicity", spec.lambda1_multiplicity, lo=mult, hi=mult))
    return {"lb_spectrum": rows}, checks


def _sweep(cfg):
    from .langevin import mixing_sweep
    from .potential import get_potential

    field_ = get_potential(cfg.potential)
    eps = cfg.eps or (0.05, 0.02, 0.01)
    rows = mixing_sweep(field_, eps, {"N": cfg.n_traj, "seed": cfg.seed})
    checks = [_assert("low-confidence rows", sum(r["low_confidence"] for r in rows), hi=0)]
    gap = np.array([r["gap_hat"] for r in rows])
    if cfg.potential in MANIFOLD_MINIMIZERS:
        ratio = np.array([r["gap_over_eps"] for r in rows])
        checks.append(_assert("gap_hat/eps max/min", ratio.max() / ratio.min(), hi=2.0))
    if cfg.potential.startswith("quadratic"):
        checks.append(_assert("max |gap_hat - 1|", np.max(np.abs(gap - 1.0)), hi=0.15))
    if cfg.potential == "doublewell1d" and len(rows) >= 2:
        checks.append(_assert("slope of log gap_hat vs 1/eps", _log_slope(eps, gap), lo=-0.2875, hi=-0.2125))
    return {"sweep": rows}, checks


WEYL_INTEGRANDS = {
    "one": lambda y: np.ones(len(y)),
    "exp_x0": lambda y: np.exp(y[:, 0]),
    "cos_mix": lambda y: np.cos(y[:, 0] + 2 * y[:, 1]) * (1 + y[:, -1] ** 2),
}


def _weyl(cfg):
    from .manifold import Circle, TubularNeighborhood, ambient_shell_integral, get_manifold, tube_integrate

    mf = get_manifold(cfg.manifold)
    r = (cfg.radii or (0.1,))[0]
    tube = TubularNeighborhood.build(mf, r)
    rows, checks = [], []
    # surfaces need far fewer nodes per axis for smooth integrands
    nt, nn = (256, 32) if mf.k == 1 else (64, 16)
    for name, phi in WEYL_INTEGRANDS.items():
        t = tube_integrate(tube, phi, n_tangential=nt, n_normal=nn)
        a = ambient_shell_integral(mf, r, phi)
        rows.append({"integrand": name, "radius": r, "tube": t.value, "ambient": a,
                     "relative_error": abs(t.value - a) / abs(a)})
        checks.append(_assert(f"{name}: tube vs ambient", abs(t.value - a) / abs(a), hi=1e-6))
    R = mf.R
    vol = 4 * np.pi * R * r if isinstance(mf, Circle) else 4 * np.pi / 3 * ((R + r) ** 3 - (R - r) ** 3)
    checks.append(_assert("volume vs closed form", abs(rows[0]["tube"] - vol) / vol, hi=1e-10))
    return {"weyl": rows}, checks


def _prior_rho(out, potential, eps, h):
    """``rho`` from an earlier spectrum run in ``out`` with the same settings, if any."""
    for path in sorted(Path(out).glob("spectrum-*/spectrum.csv")):
        with open(path) as fh:
            for row in csv.DictReader(fh):
                if row.get("potential") == potential and math.isclose(float(row["eps"]), eps) and \
                        math.isclose(float(row["h"]), h):
                    return float(row["rho"])
    return None


def _report(cfg):
    """``eps``, measured ``rho``, certified bound (log form) and ``lambda_1(S)`` per temperature."""
    from .constants import BoundRefused, build_ledger, final_bound, ledger_regions
    from .manifold import get_manifold
    from .potential import get_potential
    from .spectral import generator_spectrum, laplace_beltrami_gap, tube_stability_report

    field_ = get_potential(cfg.potential)
    led = build_ledger(field_, ledger_regions(cfg.potential))
    mf = get_manifold(OPTIMAL_MANIFOLD[cfg.potential])
    lam_S = float(laplace_beltrami_gap(mf).extrapolated[1])
    stab = tube_stability_report(mf, (0.2, 0.1, 0.05, 0.025), lambda_ref=lam_S)
    reach = float(mf.reach)
    eps_list = cfg.eps or ((0.002, 0.001) if cfg.potential == "circle2d" else (4e-4,))
    rows, checks = [], []
    for eps in eps_list:
        h = _spectrum_h(field_, eps, cfg.h)
        rho = _prior_rho(cfg.out, cfg.potential, eps, h)
        if rho is None:
            rho = generator_spectrum(field_, eps, h, m=2).rho
        row = {"epsilon": eps, "rho_measured": rho, "lambda1_S": lam_S, "B": stab.B, "reach": reach,
               "log_bound": None, "log10_bound": None, "refused": ""}
        try:
            fb = final_bound(led, eps, lambda_S=lam_S, reach=reach, B=stab.B)
            row["log_bound"] = fb.log_bound_S
            row["log10_bound"] = fb.log10_bound_S
            checks.append(_assert(f"log rho - log bound at eps={eps:g}", np.log(rho) - fb.log_bound_S, lo=0.0))
            if cfg.potential != "circle2d":
                checks.append(_assert(f"orders of magnitude below rho at eps={eps:g}",
                                      np.log10(rho) - fb.log10_bound_S, lo=0.0, hi=4.0))
        except BoundRefused as err:
            row["refused"] = str(err)
        rows.append(row)
    if not checks:
        checks.append(_assert("admissible temperatures with a bound", 0, lo=1))
    return {"figure": rows, "ledger": [{"quantity": k, "value": v} for k, v in led.to_dict().items()
                                       if isinstance(v, (int, float)) and not isinstance(v, bool)]}, checks


PIPELINES = {
    "certify": _certify,
    "ledger": _ledger,
    "lyapunov": _lyapunov,
    "spectrum": _spectrum,
    "tube": _tube,
    "lb-gap": _lb_gap,
    "sweep": _sweep,
    "weyl": _weyl,
    "report": _report,
}


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.bool_,)):
        return bool(o)
    return str(o)


def _write_csv(path, rows):
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items()})


def run(cfg: ExperimentConfig) -> RunReport:
    """Execute the named pipeline and serialize its outputs."""
    if cfg.experiment not in PIPELINES:
        raise ConfigError([f"unknown experiment {cfg.experiment!r}"])
    t0 = time.perf_counter()
    out = Path(cfg.out) / f"{cfg.experiment}-{cfg.content_hash()}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_echo(cfg))
    tables, checks, errors = {}, [], []
    try:
        tables, checks = PIPELINES[cfg.experiment](cfg)
    except Exception as err:  # recorded per stage; the exit code carries the failure
        errors.append({"stage": cfg.experiment, "error": f"{type(err).__name__}: {err}"})
    # grid masks go to their own run-length encoded files, not into the report
    for m in tables.pop(MASKS, []):
        (out / f"{m['name']}.rle.json").write_text(json.dumps(m["rle"]))
    for name, rows in tables.items():
        if rows and all(isinstance(r, dict) and not any(isinstance(v, dict) for v in r.values()) for r in rows):
            _write_csv(out / f"{name}.csv", rows)
    rep = RunReport(cfg.experiment, cfg.content_hash(), tables, checks, time.perf_counter() - t0, errors, str(out))
    (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=2, default=_jsonable))
    return rep


def _floats(text):
    return ",".join(s.strip() for s in text.split(","))


def build_parser():
    p = argparse.ArgumentParser(prog="poincare_lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("experiment", choices=EXPERIMENTS)
    r.add_argument("--config", help="key = value file; flags override it")
    r.add_argument("--potential")
    r.add_argument("--manifold")
    r.add_argument("--eps", type=_floats, help="comma-separated temperatures")
    r.add_argument("--radii", type=_floats, help="comma-separated tube radii")
    r.add_argument("--h", help="grid spacing")
    r.add_argument("--seed")
    r.add_argument("--n-traj", dest="n_traj")
    r.add_argument("--out")
    v = sub.add_parser("validate", help="check a config file and echo it with defaults")
    v.add_argument("config")
    c = sub.add_parser("recheck", help="recompute the verdict of a report.json")
    c.add_argument("report")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            print(config_echo(validate_config(Path(args.config).read_text())), end="")
            return 0
        if args.command == "recheck":
            ok = recheck(json.loads(Path(args.report).read_text()))
            print("PASS" if ok else "FAIL")
            return 0 if ok else 1
        text = Path(args.config).read_text() if args.config else ""
        cfg = validate_config(text)
        flags = [f"experiment = {args.experiment}"]
        for key in ("potential", "manifold", "eps", "radii", "h", "seed", "n_traj", "out"):
            val = getattr(args, key)
            if val is not None:
                flags.append(f"{key} = {val}")
        cfg = validate_config("\n".join(flags), base=cfg)
    except ConfigError as err:
        for e in err.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    rep = run(cfg)
    for a in rep.assertions:
        print(f"{'PASS' if a['passed'] else 'FAIL'}  {a['name']}: {a['value']}")
    for e in rep.stage_errors:
        print(f"ERROR {e['stage']}: {e['error']}")
    print(f"{cfg.experiment} -> {rep.out_dir} ({rep.wall_time:.1f} s)")
    return 0 if rep.passed else 1
