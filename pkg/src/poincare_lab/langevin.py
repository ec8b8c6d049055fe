"""Euler-Maruyama simulation of overdamped Langevin dynamics and empirical mixing rates.

The SDE is ``dX = -grad V(X) dt + sqrt(2 eps) dW``.  Every trajectory owns a
counter-based Philox stream keyed by ``(seed, trajectory id)``, so an ensemble
is bit-exactly reproducible and independent of the order in which
trajectories are run.  Radial catalog potentials run through a compiled
kernel; other fields fall back to a vectorized numpy loop.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numba
import numpy as np
from scipy import stats

from .potential import RadialPotential, ScalarField

__all__ = [
    "SimConfig",
    "TrajectoryEnsemble",
    "GapEstimate",
    "SimulationRejected",
    "em_step",
    "lipschitz_bound",
    "default_R0",
    "simulate_ensemble",
    "estimate_gap_autocorr",
    "gibbs_grid_mean",
    "mixing_sweep",
    "sweep_csv",
    "em_ou_variance",
]

#: trajectories reflected or diverged beyond this fraction reject a run
MAX_BAD_FRACTION = 0.01
#: noise is drawn in chunks of this many steps per trajectory
CHUNK = 1 << 16
MIN_TRAJECTORIES = 100


class SimulationRejected(RuntimeError):
    """Too many trajectories reflected at the guard sphere or diverged."""


def default_R0(field: ScalarField) -> float:
    """Ledger radius ``R0`` of a catalog potential; ``max(1, r_S)`` otherwise."""
    from .constants import LEDGER_REGIONS

    name = getattr(field, "name", "")
    if name in LEDGER_REGIONS:
        return float(LEDGER_REGIONS[name]().R0)
    return float(max(1.0, getattr(field, "optimal_radius", 0.0)))


def lipschitz_bound(field: ScalarField, radius: float, cells: int | None = None) -> float:
    """Largest Hessian spectral radius on a cell-centred lattice of the ball ``|x| <= radius``."""
    d = field.dim
    cells = cells or {1: 4096, 2: 96, 3: 32}[d]
    ax = -radius + (2 * radius / cells) * (np.arange(cells) + 0.5)
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    pts = pts[np.linalg.norm(pts, axis=-1) <= radius]
    # the sphere itself often carries the maximum
    rim = np.zeros((2 * d, d))
    rim[np.arange(2 * d), np.repeat(np.arange(d), 2)] = np.tile([radius, -radius], d)
    pts = np.concatenate([pts, rim])
    H = field.hessian(pts)
    return float(np.max(np.abs(np.linalg.eigvalsh(H))))


@dataclass(frozen=True)
class SimConfig:
    """Settings of one ensemble run.

    Parameters
    ----------
    eps : float
        Temperature; ``0`` gives the deterministic gradient flow.
    h : float
        Step size in time units, at most ``eps / (10 L_global)``
        (``1 / (10 L_global)`` when ``eps = 0``).
    T : float
        Recorded horizon after the burn-in.
    N : int
        Number of trajectories.
    init : {"point", "uniform", "warm"}
        ``x0`` for every trajectory, uniform on ``box``, or samples of the
        grid Gibbs density followed by ``burn_in``.
    obs_dt : float, optional
        Observation spacing, rounded to a multiple of ``h``; default ``T/2000``.
    R0 : float, optional
        Trajectories are reflected at ``|x| = 4 R0``.
    L_global : float, optional
        Gradient Lipschitz bound on the guard ball; probed when omitted.
    """

    eps: float
    h: float
    T: float
    N: int = 100
    seed: int = 0
    init: str = "warm"
    x0: tuple | None = None
    box: tuple | None = None
    burn_in: float = 1.0
    obs_dt: float | None = None
    R0: float | None = None
    L_global: float | None = None
    warm_h: float | None = None

    def __post_init__(self):
        if not (np.isfinite(self.eps) and self.eps >= 0):
            raise ValueError(f"eps must be non-negative, got {self.eps}")
        if not self.h > 0 or not self.T > 0:
            raise ValueError("h and T must be positive")
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.init not in ("point", "uniform", "warm"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "point" and self.x0 is None:
            raise ValueError("init='point' needs x0")
        if self.init == "uniform" and self.box is None:
            raise ValueError("init='uniform' needs box=(lower, upper)")
        if self.init == "warm" and self.eps == 0:
            raise ValueError("a warm start needs eps > 0")

    @property
    def obs_every(self) -> int:
        dt = self.obs_dt if self.obs_dt is not None else self.T / 2000
        return max(1, int(round(dt / self.h)))

    @property
    def n_steps(self) -> int:
        return int(np.ceil(self.T / self.h))

    @property
    def burn_steps(self) -> int:
        return int(np.ceil(self.burn_in / self.h)) if self.init == "warm" else 0

    def resolved(self, field: ScalarField) -> "SimConfig":
        """Fill in ``R0`` and ``L_global`` and check the step bound."""
        R0 = self.R0 if self.R0 is not None else default_R0(field)
        L = self.L_global if self.L_global is not None else lipschitz_bound(field, 4 * R0)
        cfg = replace(self, R0=float(R0), L_global=float(L))
        hmax = (cfg.eps if cfg.eps > 0 else 1.0) / (10 * L)
        if cfg.h > hmax * (1 + 1e-12):
            raise ValueError(f"step h = {cfg.h:.4g} exceeds the bound {hmax:.4g} (L_global = {L:.4g})")
        return cfg

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    def config_hash(self, field_name="") -> str:
        blob = json.dumps({"field": field_name, **self.to_dict()}, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def em_step(x, field: ScalarField, h, eps, xi):
    """One Euler-Maruyama step ``x - h grad V(x) + sqrt(2 eps h) xi``.

    Rows with non-finite output mark diverged trajectories; the caller
    decides what to do with them.
    """
    x = np.asarray(x, float)
    return x - h * np.asarray(field.gradient(x)) + np.sqrt(2 * eps * h) * np.asarray(xi, float)


_KERNELS: dict = {}


def _radial_kernel(field: RadialPotential):
    # catalog constructors make fresh lambdas; their code objects are shared
    fn = field._fp_over_r
    key = (fn.__code__, tuple(c.cell_contents for c in fn.__closure__ or ()))
    if key in _KERNELS:
        return _KERNELS[key]
    g = numba.njit(fn)

    @numba.njit
    def run(x, noise, h, amp, bound, step0, obs_every, obs, k_obs):
        # returns (steps completed, observations written, reflections, diverged)
        d = x.shape[0]
        refl = 0
        step = step0
        next_obs = k_obs * obs_every
        for s in range(noise.shape[0]):
            r2 = 0.0
            for i in range(d):
                r2 += x[i] * x[i]
            a = g(np.sqrt(r2))
            r2 = 0.0
            for i in range(d):
                x[i] = x[i] - h * a * x[i] + amp * noise[s, i]
                r2 += x[i] * x[i]
            if not np.isfinite(r2):
                return step, k_obs, refl, True
            r = np.sqrt(r2)
            if r > bound:
                scale = (2.0 * bound - r) / r
                if scale < -1.0:
                    return step, k_obs, refl, True
                for i in range(d):
                    x[i] *= scale
                refl += 1
            step += 1
            if step == next_obs:
                if k_obs < obs.shape[0]:
                    for i in range(d):
                        obs[k_obs, i] = x[i]
                    k_obs += 1
                next_obs += obs_every
        return step, k_obs, refl, False

    _KERNELS[key] = run
    return run


def _numpy_run(field, x, noise, h, amp, bound, step0, obs_every, obs, k_obs):
    refl = 0
    step = step0
    for s in range(noise.shape[0]):
        x[:] = em_step(x[None], field, h, 0.0, 0.0)[0] + amp * noise[s]
        r = np.linalg.norm(x)
        if not np.isfinite(r):
            return step, k_obs, refl, True
        if r > bound:
            scale = (2.0 * bound - r) / r
            if scale < -1.0:
                return step, k_obs, refl, True
            x *= scale
            refl += 1
        step += 1
        if step > 0 and step % obs_every == 0 and k_obs < obs.shape[0]:
            obs[k_obs] = x
            k_obs += 1
    return step, k_obs, refl, False


def _warm_sampler(field, eps, warm_h=None):
    """Cell probabilities and geometry of the grid Gibbs density."""
    from .spectral.operators import default_generator_domain

    h = warm_h or min(np.sqrt(eps) / 8, 0.05)
    dom = default_generator_domain(field, eps, h)
    x = dom.centers()
    logw = np.log(dom.masses()) - (field.value(x) - field.vmin) / eps
    p = np.exp(logw - logw.max())
    cdf = np.cumsum(p)
    return x, cdf / cdf[-1], dom.h


@dataclass
class TrajectoryEnsemble:
    """Observed states of ``N`` trajectories.

    ``samples`` has shape ``(N, n_obs, d)`` with ``samples[:, k]`` taken at
    ``times[k]`` (time zero is the end of the burn-in).  Diverged
    trajectories hold NaN after their divergence.
    """

    samples: np.ndarray
    times: np.ndarray
    config: SimConfig
    field_name: str
    config_hash: str
    stream_ids: list
    reflections: np.ndarray
    diverged: np.ndarray

    @property
    def N(self) -> int:
        return self.samples.shape[0]

    def sidecar(self) -> dict:
        return {
            "field": self.field_name,
            "config_hash": self.config_hash,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "times": self.times.tolist(),
            "stream_ids": self.stream_ids,
            "reflections": self.reflections.tolist(),
            "diverged": self.diverged.tolist(),
            "shape": list(self.samples.shape),
        }

    def save(self, path):
        """Write ``<path>.npy`` (samples) and ``<path>.json`` (sidecar)."""
        path = Path(path)
        np.save(path.with_suffix(".npy"), self.samples)
        path.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=2))
        return path.with_suffix(".npy"), path.with_suffix(".json")

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        cfg = {k: (tuple(v) if isinstance(v, list) else v) for k, v in meta["config"].items()}
        return cls(
            np.load(path.with_suffix(".npy")), np.asarray(meta["times"]), SimConfig(**cfg), meta["field"],
            meta["config_hash"], meta["stream_ids"], np.asarray(meta["reflections"]), np.asarray(meta["diverged"]),
        )


def simulate_ensemble(config: SimConfig, field: ScalarField) -> TrajectoryEnsemble:
    """Run ``config.N`` independent Euler-Maruyama trajectories.

    Raises
    ------
    SimulationRejected
        If more than 1% of trajectories were reflected at ``4 R0`` or diverged.
    ValueError
        If the step violates ``h <= eps / (10 L_global)``.
    """
    cfg = config.resolved(field)
    d = field.dim
    bound = 4 * cfg.R0
    amp = np.sqrt(2 * cfg.eps * cfg.h)
    n_obs = cfg.n_steps // cfg.obs_every + 1
    samples = np.full((cfg.N, n_obs, d), np.nan)
    refl = np.zeros(cfg.N, dtype=np.int64)
    diverged = np.zeros(cfg.N, dtype=bool)
    run = _radial_kernel(field) if isinstance(field, RadialPotential) else None
    if cfg.init == "warm":
        cells, cdf, cell_h = _warm_sampler(field, cfg.eps, cfg.warm_h)
    total = cfg.burn_steps + cfg.n_steps
    for n in range(cfg.N):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, n])))
        if cfg.init == "point":
            x = np.array(cfg.x0, float).reshape(d)
        elif cfg.init == "uniform":
            lo, hi = (np.broadcast_to(np.asarray(b, float), (d,)) for b in cfg.box)
            x = lo + (hi - lo) * rng.random(d)
        else:
            k = min(int(np.searchsorted(cdf, rng.random())), len(cdf) - 1)
            x = cells[k] + cell_h * (rng.random(d) - 0.5)
        x = np.ascontiguousarray(x, float)
        step = -cfg.burn_steps
        if step == 0:
            samples[n, 0] = x
        k_obs = 1
        obs = samples[n]
        done = 0
        while done < total:
            m = min(CHUNK, total - done)
            noise = rng.standard_normal((m, d))
            if step < 0 <= step + m:
                # record the state at time zero exactly at the end of the burn-in
                head = -step
                args = (x, noise[:head], cfg.h, amp, bound, step, cfg.obs_every, obs, k_obs)
                step, k_obs, r, bad = run(*args) if run else _numpy_run(field, *args)
                refl[n] += r
                if bad:
                    diverged[n] = True
                    break
                samples[n, 0] = x
                noise = noise[head:]
            args = (x, noise, cfg.h, amp, bound, step, cfg.obs_every, obs, k_obs)
            step, k_obs, r, bad = run(*args) if run else _numpy_run(field, *args)
            refl[n] += r
            done += m
            if bad:
                diverged[n] = True
                break
        if diverged[n]:
            samples[n, k_obs:] = np.nan
    bad = np.count_nonzero((refl > 0) | diverged)
    if bad > MAX_BAD_FRACTION * cfg.N:
        raise SimulationRejected(
            f"{bad} of {cfg.N} trajectories reflected at |x| = {bound:g} or diverged; reduce h or eps"
        )
    times = cfg.h * cfg.obs_every * np.arange(n_obs)
    return TrajectoryEnsemble(
        samples, times, cfg, getattr(field, "name", repr(field)), cfg.config_hash(getattr(field, "name", "")),
        [[cfg.seed, n] for n in range(cfg.N)], refl, diverged,
    )


@dataclass
class GapEstimate:
    """Decay rate of the stationary autocovariance of an observable.

    ``ci`` is a batch-means interval over trajectory groups centred on
    ``rate``; ``window`` is the fitted lag range in time units.
    """

    rate: float
    ci: tuple
    r2: float
    window: tuple
    low_confidence: bool
    n_traj: int
    batch_rates: np.ndarray = field(repr=False, default=None)
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "rate": self.rate, "ci": list(self.ci), "r2": self.r2, "window": list(self.window),
            "low_confidence": self.low_confidence, "n_traj": self.n_traj, "notes": self.notes,
        }


def _observable(samples, observable):
    if observable is None:
        return samples[..., 0]
    if isinstance(observable, (int, np.integer)):
        return samples[..., int(observable)]
    return np.asarray(observable(samples), float)


def _autocov(yc, max_lag):
    n = yc.shape[-1]
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    F = np.fft.rfft(yc, nfft, axis=-1)
    ac = np.fft.irfft(F * np.conj(F), nfft, axis=-1)[..., :max_lag]
    return ac.sum(axis=0) / (yc.shape[0] * (n - np.arange(max_lag)))


def _fit(t, c):
    A = np.column_stack([np.ones_like(t), t])
    y = np.log(c)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1 - np.sum((y - A @ coef) ** 2) / ss if ss > 0 else 1.0
    return -coef[1], float(r2)


def estimate_gap_autocorr(ensemble: TrajectoryEnsemble, observable=None, burn_in: float = 0.0,
                          window=(0.9, 0.3), n_batches: int = 10, level: float = 0.95) -> GapEstimate:
    """Fit ``log C(tau) = a - rate * tau`` to the ensemble autocovariance.

    The fit uses the lags where the normalized autocorrelation first falls
    from ``window[0]`` to ``window[1]``, which skips the fast transients and
    stops before the noise floor.

    Parameters
    ----------
    observable : None, int or callable
        Coordinate index (default 0) or a map ``(N, n, d) -> (N, n)``.
    burn_in : float
        Additional prefix (time units) discarded before fitting.
    """
    if ensemble.N < MIN_TRAJECTORIES:
        raise ValueError(f"rate estimation needs at least {MIN_TRAJECTORIES} trajectories, got {ensemble.N}")
    keep = ~ensemble.diverged
    t_all = ensemble.times
    y = _observable(ensemble.samples[keep], observable)[:, t_all >= burn_in]
    dt = t_all[1] - t_all[0]
    yc = y - y.mean()
    if not np.var(yc) > 0:
        raise ValueError("observable has zero variance")
    max_lag = yc.shape[1] // 2
    ac = _autocov(yc, max_lag)
    rho = ac / ac[0]
    notes = []
    hi, lo = window
    below = np.flatnonzero(rho <= hi)
    if below.size == 0:
        raise ValueError(f"autocorrelation never falls below {hi} within half the horizon; lengthen T")
    k0 = int(below[0])
    after = np.flatnonzero(rho[k0:] < lo)
    if after.size:
        k1 = k0 + int(after[0])
    else:
        k1 = max_lag
        notes.append(f"autocorrelation stays above {lo} up to half the horizon")
    if k1 - k0 < 4:
        notes.append("fewer than 4 lags in the fit window")
        k1 = min(max_lag, k0 + 4)
    lags = np.arange(k0, k1)
    good = ac[lags] > 0
    rate, r2 = _fit(lags[good] * dt, ac[lags][good])
    groups = np.array_split(np.arange(yc.shape[0]), n_batches)
    rates = []
    for g in groups:
        c = _autocov(yc[g], k1)[lags]
        ok = c > 0
        if ok.sum() >= 3:
            rates.append(_fit(lags[ok] * dt, c[ok])[0])
    rates = np.array(rates)
    if rates.size >= 2:
        half = stats.t.ppf(0.5 + level / 2, rates.size - 1) * rates.std(ddof=1) / np.sqrt(rates.size)
    else:
        half = np.inf
        notes.append("too few usable batches for an interval")
    low = bool(r2 < 0.9 or notes)
    if r2 < 0.9:
        notes.append(f"fit R^2 = {r2:.3f} < 0.9")
    return GapEstimate(
        float(rate), (float(rate - half), float(rate + half)), r2, (float(lags[0] * dt), float(lags[-1] * dt)),
        low, int(yc.shape[0]), rates, notes,
    )


def em_ou_variance(eps: float, h: float, a: float = 1.0) -> float:
    """Stationary variance of Euler-Maruyama for ``dX = -a X dt + sqrt(2 eps) dW``.

    The AR(1) recursion ``x' = (1 - a h) x + sqrt(2 eps h) xi`` has
    variance ``2 eps h / (1 - (1 - a h)^2) = eps / (a (1 - a h / 2))``.
    """
    return eps / (a * (1 - a * h / 2))


def gibbs_grid_mean(field: ScalarField, eps: float, fn=None, h=None) -> float:
    """Mean of ``fn`` (default ``V``) under the Gibbs density by grid quadrature."""
    from .spectral.operators import default_generator_domain

    h = h or min(np.sqrt(eps) / 16, 0.02)
    dom = default_generator_domain(field, eps, h)
    x = dom.centers()
    V = field.value(x)
    w = dom.masses() * np.exp(-(V - field.vmin) / eps)
    vals = V if fn is None else np.asarray(fn(x), float)
    return float(np.sum(w * vals) / np.sum(w))


def mixing_sweep(field: ScalarField, eps_list, template: dict | None = None, observable=None,
                 pilot=True) -> list[dict]:
    """Simulated gap estimates over a list of temperatures.

    Time scales of each run are set from a coarse eigensolve (the pilot):
    ``T = T_relax / gap_pilot`` and observations every ``1 / (obs_per_relax
    gap_pilot)``.  The pilot never enters the estimate itself.  The step is
    ``h_fraction`` of the admissible bound.

    Returns rows with keys ``epsilon, gap_hat, gap_over_eps, ci_lo, ci_hi,
    r2, low_confidence`` plus the pilot gap.
    """
    from .spectral import generator_spectrum

    t = {"N": 100, "seed": 0, "T_relax": 12.0, "obs_per_relax": 60, "h_fraction": 1.0, "burn_in": 1.0}
    t.update(template or {})
    R0 = t.get("R0") or default_R0(field)
    L = t.get("L_global") or lipschitz_bound(field, 4 * R0)
    rows = []
    for eps in eps_list:
        gap_pilot = t.get("gap_pilot")
        if gap_pilot is None:
            gap_pilot = generator_spectrum(field, eps, h=np.sqrt(eps) / 4 if field.dim > 1 else np.sqrt(eps) / 16).gap
        h = t["h_fraction"] * eps / (10 * L)
        cfg = SimConfig(
            eps=eps, h=h, T=t["T_relax"] / gap_pilot, N=t["N"], seed=t["seed"], init="warm",
            burn_in=t["burn_in"], obs_dt=1.0 / (t["obs_per_relax"] * gap_pilot), R0=R0, L_global=L,
        )
        est = estimate_gap_autocorr(simulate_ensemble(cfg, field), observable)
        rows.append({
            "epsilon": eps,
            "gap_hat": est.rate,
            "gap_over_eps": est.rate / eps,
            "ci_lo": est.ci[0],
            "ci_hi": est.ci[1],
            "r2": est.r2,
            "low_confidence": est.low_confidence,
            "gap_pilot": float(gap_pilot),
        })
    return rows


def sweep_csv(rows, path=None) -> str:
    """Serialize sweep rows as CSV; also written to ``path`` when given."""
    cols = ["epsilon", "gap_hat", "gap_over_eps", "ci_lo", "ci_hi", "r2", "low_confidence", "gap_pilot"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
