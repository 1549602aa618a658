"""SDE catalogue and Euler-Maruyama simulation with intermediate-iterate capture.

Drift and diffusion handles take ``(x, t)`` where ``x`` has shape ``(dim,)`` or
``(batch, dim)`` and ``t`` is a scalar or an array broadcastable against
``x[..., :1]``. Diffusion is diagonal: it returns an elementwise scale.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence

import numpy as np

from ._rng import make_rng
from .exceptions import DivergedTrajectory, InvalidCapture
from .io import write_csv

_GRID_TOL = 1e-9


@dataclass(frozen=True)
class SdeSpec:
    """A forward process ``dx = a(x, t) dt + b(x, t) dw`` on ``[0, horizon]``."""

    dim: int
    drift: Callable
    diffusion: Callable
    horizon: float = 1.0
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if not 0.0 < self.horizon <= 1.0:
            raise ValueError(f"horizon must lie in (0, 1], got {self.horizon}")

    def a(self, x, t):
        return np.broadcast_to(self.drift(x, t), np.shape(x))

    def b(self, x, t):
        return np.broadcast_to(self.diffusion(x, t), np.shape(x))


@dataclass(frozen=True)
class EmConfig:
    dt: float
    seed: int = 0
    capture_times: Sequence[float] = ()

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "capture_times", tuple(sorted(float(c) for c in self.capture_times)))

    def n_steps(self, horizon):
        if self.dt > horizon * (1 + 1e-12):
            raise ValueError(f"dt={self.dt} exceeds horizon={horizon}")
        return int(np.floor(horizon / self.dt + _GRID_TOL))

    def snap(self, tau, horizon):
        """Grid index nearest ``tau``; raises InvalidCapture outside ``[0, horizon]``."""
        if tau > horizon + 1e-12 or tau < -1e-12:
            raise InvalidCapture(f"capture time {tau} outside [0, {horizon}]")
        return min(int(np.rint(tau / self.dt)), self.n_steps(horizon))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    captures: Dict[float, np.ndarray]
    capture_index: Dict[float, int]

    def to_csv(self, path, capture_path=None, comments=()):
        dim = self.states.shape[1]
        cols = [f"x{i}" for i in range(dim)]
        write_csv(path, ["t"] + cols,
                  (np.concatenate([[t], s]) for t, s in zip(self.times, self.states)),
                  comments)
        if capture_path is not None:
            rows = [np.concatenate([[self.times[self.capture_index[tau]]], self.captures[tau]])
                    for tau in sorted(self.captures)]
            write_csv(capture_path, ["tau"] + cols, rows, comments)


@dataclass
class Ensemble:
    """End states and captured iterates of many independent paths."""

    final: np.ndarray
    captures: Dict[float, np.ndarray]
    previous: np.ndarray
    t_final: float


def _check_finite(values, t, what):
    bad = ~np.isfinite(values)
    if bad.any():
        component = int(np.argwhere(bad)[0][-1])
        raise DivergedTrajectory(t, component, f"non-finite {what} at t={t!r}, component {component}")


def em_step(x, t, dt, spec, z):
    """One Euler-Maruyama step ``x + a dt + b * z * sqrt(dt)``."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if x.shape[-1] != spec.dim or z.shape != x.shape:
        raise ValueError(f"x {x.shape} and z {z.shape} must both end in dim={spec.dim}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    a = spec.a(x, t)
    _check_finite(a, t, "drift")
    b = spec.b(x, t)
    _check_finite(b, t, "diffusion")
    out = x + a * dt + b * z * np.sqrt(dt)
    _check_finite(out, t, "iterate")
    return out


def path_noise(seed, index, n_steps, dim):
    """The standard-normal increments used by path ``index`` of a seeded run."""
    return make_rng(seed, "em", index).standard_normal((n_steps, dim))


def simulate(spec, x0, cfg, index=0):
    """Simulate one path on the ``cfg.dt`` grid from 0 to ``spec.horizon``.

    ``index`` selects the path's noise stream, so path ``i`` of an ensemble
    can be regenerated in isolation.
    """
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (spec.dim,):
        raise ValueError(f"x0 must have shape ({spec.dim},), got {x.shape}")
    n = cfg.n_steps(spec.horizon)
    snapped = {tau: cfg.snap(tau, spec.horizon) for tau in cfg.capture_times}
    z = path_noise(cfg.seed, index, n, spec.dim)
    times = cfg.dt * np.arange(n + 1)
    states = np.empty((n + 1, spec.dim))
    states[0] = x
    for j in range(n):
        x = em_step(x, times[j], cfg.dt, spec, z[j])
        states[j + 1] = x
    captures = {tau: states[j].copy() for tau, j in snapped.items()}
    return Trajectory(times, states, captures, snapped)


def simulate_ensemble(spec, x0, cfg, n_paths, noise=None, chunk=2048):
    """Vectorized EM over ``n_paths`` independent paths.

    Path ``i`` draws from the same stream as ``simulate(..., index=i)``. Pass
    ``noise`` of shape ``(n_paths, n_steps, dim)`` to drive the paths with
    common random numbers instead.
    """
    n = cfg.n_steps(spec.horizon)
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (n_paths, spec.dim))
    snapped = {tau: cfg.snap(tau, spec.horizon) for tau in cfg.capture_times}
    if noise is not None and noise.shape != (n_paths, n, spec.dim):
        raise ValueError(f"noise must have shape {(n_paths, n, spec.dim)}, got {noise.shape}")
    final = np.empty((n_paths, spec.dim))
    prev = np.empty((n_paths, spec.dim))
    caps = {tau: np.empty((n_paths, spec.dim)) for tau in snapped}
    sqdt = np.sqrt(cfg.dt)
    for lo in range(0, n_paths, chunk):
        hi = min(lo + chunk, n_paths)
        if noise is None:
            z = np.stack([path_noise(cfg.seed, i, n, spec.dim) for i in range(lo, hi)])
        else:
            z = noise[lo:hi]
        x = x0[lo:hi].copy()
        p = x.copy()
        for tau, j in snapped.items():
            if j == 0:
                caps[tau][lo:hi] = x
        for j in range(n):
            t = j * cfg.dt
            a = spec.a(x, t)
            b = spec.b(x, t)
            p = x
            x = x + a * cfg.dt + b * z[:, j] * sqdt
            _check_finite(x, t, "iterate")
            for tau, k in snapped.items():
                if k == j + 1:
                    caps[tau][lo:hi] = x
        final[lo:hi] = x
        prev[lo:hi] = p
    return Ensemble(final, caps, prev, n * cfg.dt)


def coarsen_noise(z, factor):
    """Aggregate fine-grid standard normals into ``factor``-times coarser ones.

    The coarse draw is the normalized sum of the fine draws it spans, so both
    grids see the same Brownian path.
    """
    p, n, d = z.shape
    if n % factor:
        raise ValueError(f"{n} fine steps not divisible by {factor}")
    return z.reshape(p, n // factor, factor, d).sum(axis=2) / np.sqrt(factor)


# -- drift catalogue ---------------------------------------------------------

def lotka_volterra_drift(alpha, beta, gamma, delta):
    """Predator-prey field ``[a x1 - b x1 x2, d x1 x2 - g x2]``."""
    rates = np.array([alpha, beta, gamma, delta], dtype=float)
    if (rates <= 0).any():
        raise ValueError(f"Lotka-Volterra rates must be positive, got {rates}")

    def drift(x, t):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([alpha * x1 - beta * x1 * x2, delta * x1 * x2 - gamma * x2], axis=-1)

    return drift


CAT_MAP = np.array([[1.0, 1.0], [1.0, 2.0]])


def cat_map_drift():
    """Continuous-time cat-map field ``(M - I) x``, ``M = [[1, 1], [1, 2]]``."""
    gen = CAT_MAP - np.eye(2)

    def drift(x, t):
        return np.asarray(x, dtype=float) @ gen.T

    return drift


def _constant(value):
    def diffusion(x, t):
        return np.full(np.shape(x), value, dtype=float)

    return diffusion


def ou_process(theta=1.0, sigma=np.sqrt(2.0), dim=1, horizon=1.0):
    return SdeSpec(dim, lambda x, t: -theta * np.asarray(x, dtype=float), _constant(sigma),
                   horizon, "ou", {"theta": theta, "sigma": sigma})


def beta_at(t, beta_min, beta_max):
    return beta_min + t * (beta_max - beta_min)


def beta_integral(t, beta_min, beta_max):
    """``int_0^t beta(s) ds`` for the linear schedule."""
    return beta_min * t + 0.5 * t * t * (beta_max - beta_min)


def vp_process(beta_min=0.1, beta_max=20.0, dim=1, horizon=1.0):
    """Variance-preserving process ``dx = -beta/2 x dt + sqrt(beta) dw``."""

    def drift(x, t):
        return -0.5 * beta_at(t, beta_min, beta_max) * np.asarray(x, dtype=float)

    def diffusion(x, t):
        return np.broadcast_to(np.sqrt(beta_at(t, beta_min, beta_max)), np.shape(x)).astype(float)

    return SdeSpec(dim, drift, diffusion, horizon, "vp", {"beta_min": beta_min, "beta_max": beta_max})


def lotka_volterra_process(rates=(1.0, 1.0, 1.0, 1.0), sigma=0.1, horizon=1.0):
    return SdeSpec(2, lotka_volterra_drift(*rates), _constant(sigma), horizon,
                   "lotka_volterra", {"rates": list(rates), "sigma": sigma})


def cat_map_process(sigma=0.5, horizon=1.0):
    return SdeSpec(2, cat_map_drift(), _constant(sigma), horizon, "cat_map", {"sigma": sigma})


def vp_kernel(x0, t, beta_min=0.1, beta_max=20.0):
    """Closed-form Gaussian transition of the VP process: ``(mean, std)``."""
    if np.min(t) < 0.0 or np.max(t) > 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if not 0.0 < beta_min <= beta_max:
        raise ValueError("need 0 < beta_min <= beta_max")
    integ = beta_integral(np.asarray(t, dtype=float), beta_min, beta_max)
    mean = np.asarray(x0, dtype=float) * np.exp(-0.5 * integ)
    std = np.sqrt(-np.expm1(-integ))
    return mean, std


def vp_transition(x_s, s, t, beta_min=0.1, beta_max=20.0):
    """Gaussian transition of the VP process from time ``s`` to ``t >= s``."""
    integ = beta_integral(t, beta_min, beta_max) - beta_integral(s, beta_min, beta_max)
    return np.asarray(x_s, dtype=float) * np.exp(-0.5 * integ), np.sqrt(-np.expm1(-integ))


def make_process(name, dim=None, **params):
    """Build a catalogue process by name (``ou``, ``vp``, ``lotka_volterra``, ``cat_map``)."""
    if name == "ou":
        return ou_process(dim=dim or 1, **params)
    if name == "vp":
        return vp_process(dim=dim or 1, **params)
    if name == "lotka_volterra":
        return lotka_volterra_process(**params)
    if name == "cat_map":
        return cat_map_process(**params)
    raise ValueError(f"unknown process {name!r}")
