"""Generation by reverse-time Euler-Maruyama and the probability-flow ODE."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._rng import make_rng
from .exceptions import DivergedSample, StepSizeUnderflow
from .io import write_csv

H_MIN = 1e-12


@dataclass
class SamplerConfig:
    n_steps: int = 500
    t_start: Optional[float] = None
    t_min: float = 1e-3
    pathway: str = "final"
    rtol: float = 1e-5
    atol: float = 1e-5
    seed: int = 0
    # Skip the noise injection on the last reverse step.
    denoise_last: bool = True

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if self.pathway not in ("final", "intermediate"):
            raise ValueError(f"unknown pathway {self.pathway!r}")

    def start(self, spec):
        """Starting time; the intermediate pathway defaults to half the horizon."""
        if self.t_start is not None:
            t0 = self.t_start
        else:
            t0 = spec.horizon if self.pathway == "final" else 0.5 * spec.horizon
        if not 0.0 < t0 <= spec.horizon:
            raise ValueError(f"t_start must lie in (0, {spec.horizon}], got {t0}")
        if not 0.0 <= self.t_min < t0:
            raise ValueError(f"t_min={self.t_min} must lie in [0, t_start)")
        return t0


def score_fn(model, pathway="final"):
    """Adapt a ``ScoreNet`` (or any ``(x, t) -> score`` callable) to ``(x, t) -> score``."""
    if hasattr(model, "layers") and hasattr(model, "forward"):
        def fn(x, t):
            return model.forward(x, np.full(x.shape[:-1], t), pathway)[0]
        return fn
    return model


def reverse_em(net, spec, x_T, cfg, return_path=False):
    """Integrate ``dx = [f - g^2 s] dt + g dw_bar`` from ``t_start`` down to ``t_min``."""
    t0 = cfg.start(spec)
    score = score_fn(net, cfg.pathway)
    x = np.array(x_T, dtype=float)
    if x.shape[-1] != spec.dim:
        raise ValueError(f"x_T must end in dim={spec.dim}, got {x.shape}")
    times = np.linspace(t0, cfg.t_min, cfg.n_steps + 1)
    rng = make_rng(cfg.seed, "reverse")
    path = [x.copy()] if return_path else None
    for i in range(cfg.n_steps):
        t, dt = times[i], times[i] - times[i + 1]
        f = spec.a(x, t)
        g = spec.b(x, t)
        s = score(x, t)
        x = x - (f - g ** 2 * s) * dt
        if not (cfg.denoise_last and i == cfg.n_steps - 1):
            x = x + g * rng.standard_normal(x.shape) * np.sqrt(dt)
        if not np.isfinite(x).all():
            raise DivergedSample(f"reverse EM produced a non-finite state at t={t}")
        if return_path:
            path.append(x.copy())
    return (x, np.stack(path)) if return_path else x


# -- Dormand-Prince 5(4) -----------------------------------------------------------

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass
class OdeStats:
    n_accepted: int = 0
    n_rejected: int = 0
    n_evals: int = 0


def _initial_step(field, t0, x0, f0, direction, rtol, atol):
    scale = atol + rtol * np.abs(x0)
    d0 = np.max(np.abs(x0) / scale)
    d1 = np.max(np.abs(f0) / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = field(t0 + direction * h0, x0 + direction * h0 * f0)
    d2 = np.max(np.abs(f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def rk45_integrate(field, x0, t0, t1, rtol=1e-6, atol=1e-9, max_steps=100000, stats=None):
    """Adaptive Dormand-Prince RK45 with PI step control; returns ``x(t1)``.

    A step is accepted when every component of the embedded error estimate
    satisfies ``|err_i| <= atol + rtol * max(|x_i|, |x_new_i|)``.
    """
    if t0 == t1:
        raise ValueError("t0 and t1 must differ")
    x = np.array(x0, dtype=float)
    shape = x.shape
    x = x.ravel()
    stats = stats if stats is not None else OdeStats()

    def f(t, y):
        stats.n_evals += 1
        out = np.asarray(field(t, y.reshape(shape)), dtype=float).ravel()
        if not np.isfinite(out).all():
            raise DivergedSample(f"vector field is non-finite at t={t}")
        return out

    direction = 1.0 if t1 > t0 else -1.0
    t = t0
    k1 = f(t, x)
    h = _initial_step(f, t, x, k1, direction, rtol, atol)
    safety, alpha, beta = 0.9, 0.7 / 5, 0.4 / 5
    err_prev = 1e-4
    for _ in range(max_steps):
        if direction * (t1 - t) <= 0:
            return x.reshape(shape)
        h = min(h, abs(t1 - t))
        if h < H_MIN:
            raise StepSizeUnderflow(f"step size fell below {H_MIN} at t={t}")
        hs = direction * h
        ks = [k1]
        for i in range(1, 7):
            xi = x + hs * sum(a * k for a, k in zip(_A[i], ks))
            ks.append(f(t + _C[i] * hs, xi))
        x_new = xi  # stage 7 is evaluated at the 5th-order solution (FSAL)
        err = hs * sum(e * k for e, k in zip(_E, ks))
        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
        err_norm = float(np.max(np.abs(err) / scale))
        if err_norm <= 1.0:
            t = t1 if h == abs(t1 - t) else t + hs
            x = x_new
            k1 = ks[6]
            stats.n_accepted += 1
            factor = safety * max(err_norm, 1e-10) ** -alpha * err_prev ** beta
            h *= min(5.0, max(0.2, factor))
            err_prev = max(err_norm, 1e-4)
        else:
            stats.n_rejected += 1
            h *= max(0.2, safety * err_norm ** -alpha)
    raise StepSizeUnderflow(f"exceeded {max_steps} steps before reaching t1={t1}")


def probability_flow_sample(net, spec, x_T, cfg, stats=None):
    """Integrate ``dx/dt = f - g^2 s / 2`` backward from ``t_start`` to ``t_min``."""
    t0 = cfg.start(spec)
    score = score_fn(net, cfg.pathway)
    x_T = np.array(x_T, dtype=float)
    if x_T.shape[-1] != spec.dim:
        raise ValueError(f"x_T must end in dim={spec.dim}, got {x_T.shape}")

    def field(t, x):
        g = spec.b(x, t)
        return spec.a(x, t) - 0.5 * g ** 2 * score(x, t)

    return rk45_integrate(field, x_T, t0, cfg.t_min, cfg.rtol, cfg.atol, stats=stats)


def write_samples(path, samples, cfg, method="reverse_em", spec=None):
    """Dump samples as CSV; with ``spec`` the header records the resolved start time."""
    samples = np.atleast_2d(samples)
    t_start = cfg.start(spec) if spec is not None else cfg.t_start
    cols = [f"x{i}" for i in range(samples.shape[1])]
    write_csv(path, cols, samples,
              [f"pathway={cfg.pathway}", f"t_start={t_start!r}", f"seed={cfg.seed}",
               f"method={method}"])
