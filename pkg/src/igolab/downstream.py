"""Downstream tasks over frozen generators.

Covers projection onto a generator's range, the projected power method for
generative PCA, CSGM recovery with a sample-complexity sweep, the
range-expansion probe, a sampled Lipschitz lower bound, and weight-divergence
metrics between the outer and intermediate encoder/decoder layers.
"""
import hashlib
import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from sklearn.metrics import pairwise_distances_argmin_min

from . import nn
from ._rng import make_rng
from .exceptions import ZeroVector
from .io import write_csv


class Generator:
    """A deterministic latent-to-data map with a vector-Jacobian product.

    ``fn(z)`` maps latents of shape ``(..., latent_dim)`` to ``(..., out_dim)``;
    ``vjp(z, g)`` returns ``J(z)^T g`` with the same batch layout. Latents are
    confined to the Euclidean ball of radius ``radius``.
    """

    def __init__(self, fn, vjp, latent_dim, out_dim, radius=10.0, mode="custom", matrix=None):
        self.fn = fn
        self._vjp = vjp
        self.latent_dim = int(latent_dim)
        self.out_dim = int(out_dim)
        self.radius = float(radius)
        self.mode = mode
        self.matrix = matrix

    def __call__(self, z):
        return self.fn(np.asarray(z, dtype=float))

    def vjp(self, z, g):
        return self._vjp(np.asarray(z, dtype=float), np.asarray(g, dtype=float))

    def clamp(self, z):
        """Project latents onto the ball ``||z|| <= radius``."""
        z = np.asarray(z, dtype=float)
        if not np.isfinite(self.radius):
            return z
        norm = np.linalg.norm(z, axis=-1, keepdims=True)
        scale = np.where(norm > self.radius, self.radius / np.maximum(norm, 1e-300), 1.0)
        return z * scale

    def sample_latents(self, n, rng):
        """Uniform draws from the latent ball (standard normal if the ball is unbounded)."""
        g = rng.standard_normal((n, self.latent_dim))
        if not np.isfinite(self.radius):
            return g
        g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
        u = rng.uniform(size=(n, 1)) ** (1.0 / self.latent_dim)
        return g * u * self.radius

    @classmethod
    def linear_rig(cls, B, radius=10.0):
        """``G(z) = B z`` for an explicit ``(out_dim, latent_dim)`` matrix."""
        B = np.atleast_2d(np.asarray(B, dtype=float))
        return cls(lambda z: z @ B.T, lambda z, g: g @ B, B.shape[1], B.shape[0],
                   radius, "linear_rig", B)

    @classmethod
    def from_net(cls, net, pathway="final", t=1e-3, radius=10.0):
        """Wrap a trained ``ScoreNet`` evaluated at a fixed time ``t``.

        ``final`` maps data-space latents through ``D . S . E``; ``intermediate``
        maps latents at the tap width through ``D_tau . S[tap:]``.
        """
        layers = net.generator_layers(pathway)

        def fn(z):
            return nn.run_layers(layers, z, t)[0]

        def vjp(z, g):
            _, tape = nn.run_layers(layers, z, t)
            return nn.backward(tape, g, accumulate=False)

        return cls(fn, vjp, layers[0].n_in, layers[-1].n_out, radius, pathway)


def _orthonormal_columns(B):
    return np.allclose(B.T @ B, np.eye(B.shape[1]), atol=1e-12)


@dataclass
class Projection:
    z: np.ndarray
    x: np.ndarray
    residual: float


def project_to_range(gen, w, steps=100, lr=1e-3, seed=0, method="auto", z0=None):
    """Approximate ``argmin_{||z|| <= r} ||G(z) - w||^2``; return the best iterate.

    ``method='auto'`` solves linear rigs in closed form when the solution lies
    inside the latent ball and otherwise runs projected Adam (``'adam'``).
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (gen.out_dim,):
        raise ValueError(f"target must have shape ({gen.out_dim},), got {w.shape}")
    if method == "auto" and gen.mode == "linear_rig":
        B = gen.matrix
        if _orthonormal_columns(B):
            z = B.T @ w
        else:
            z = np.linalg.lstsq(B, w, rcond=None)[0]
        if np.linalg.norm(z) <= gen.radius:
            x = gen(z)
            return Projection(z, x, float(np.sum((x - w) ** 2)))
        z0 = gen.clamp(z)
    elif method not in ("auto", "adam"):
        raise ValueError(f"unknown projection method {method!r}")
    if z0 is None:
        z0 = gen.sample_latents(1, make_rng(seed, "project"))[0]
    z = gen.clamp(np.asarray(z0, dtype=float)).copy()
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best = None
    for k in range(1, steps + 1):
        x = gen(z)
        r = x - w
        obj = float(r @ r)
        if best is None or obj < best.residual:
            best = Projection(z.copy(), x, obj)
        g = 2.0 * gen.vjp(z, r)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        z = gen.clamp(z - lr * (m / (1 - b1 ** k)) / (np.sqrt(v / (1 - b2 ** k)) + eps))
    x = gen(z)
    obj = float(np.sum((x - w) ** 2))
    if best is None or obj < best.residual:
        best = Projection(z.copy(), x, obj)
    return best


def power_method(V, iters=50, seed=0):
    """Classic power iteration from the same start vector ``ppower`` uses."""
    V = np.asarray(V, dtype=float)
    w = _start_vector(V.shape[0], seed)
    for _ in range(iters):
        y = V @ w
        norm = np.linalg.norm(y)
        if norm == 0:
            raise ZeroVector("V w vanished")
        w = y / norm
    return w


def _start_vector(n, seed):
    w = make_rng(seed, "ppower").standard_normal(n)
    return w / np.linalg.norm(w)


def ppower(V, gen, iters=50, seed=0, **projection_kw):
    """Projected power method: ``w <- normalize(P_range(V w))``.

    ``gen`` may be a single generator or a sequence of generators; with
    several, ``V w`` is projected onto each range and the projection with the
    largest Rayleigh quotient is kept.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim != 2 or V.shape[0] != V.shape[1] or not np.allclose(V, V.T):
        raise ValueError("V must be a symmetric square matrix")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    gens = list(gen) if isinstance(gen, (list, tuple)) else [gen]
    w = _start_vector(V.shape[0], seed)
    for it in range(iters):
        y = V @ w
        if not np.any(y):
            raise ZeroVector(f"V w vanished at iteration {it}")
        best, best_q = None, -np.inf
        for j, g in enumerate(gens):
            p = project_to_range(g, y, seed=seed + 7919 * it + j, **projection_kw).x
            norm = np.linalg.norm(p)
            if norm == 0:
                continue
            p = p / norm
            q = float(p @ V @ p) if len(gens) > 1 else 0.0
            if q > best_q:
                best, best_q = p, q
        if best is None:
            raise ZeroVector(f"projection onto the generator range vanished at iteration {it}")
        w = best
    return w


def spiked_covariance(x_star, n_samples, beta=1.0, seed=0):
    """Sample covariance of ``sqrt(beta) u x_star + noise`` (generative-PCA data)."""
    x_star = np.asarray(x_star, dtype=float)
    rng = make_rng(seed, "spiked")
    u = rng.standard_normal((n_samples, 1))
    X = np.sqrt(beta) * u * x_star + rng.standard_normal((n_samples, x_star.size))
    return X.T @ X / n_samples


# -- compressed sensing ----------------------------------------------------------

@dataclass
class MeasurementModel:
    """Linear observations ``y = A x + noise`` with ``A_ij ~ N(0, 1/m)``."""

    A: np.ndarray
    y: np.ndarray
    noise_std: float = 0.0
    x_true: Optional[np.ndarray] = None

    @classmethod
    def gaussian(cls, x_true, m, noise_std=0.0, seed=0, trial=0):
        x_true = np.asarray(x_true, dtype=float)
        rng = make_rng(seed, "measure", m, trial)
        n = x_true.size
        A = rng.standard_normal((m, n)) / np.sqrt(max(m, 1))
        y = A @ x_true + noise_std * rng.standard_normal(m)
        return cls(A, y, noise_std, x_true)


@dataclass
class Recovery:
    x_hat: np.ndarray
    z: np.ndarray
    residual: float
    recovery_error: Optional[float]
    objective_trace: List[float] = field(default_factory=list)


def relative_error(x_hat, x_true):
    return float(np.linalg.norm(x_hat - x_true) / np.linalg.norm(x_true))


def csgm_recover(model, gen, steps=500, lr=1.0, restarts=1, seed=0, step_rule="backtracking"):
    """Minimize ``||A G(z) - y||^2`` over the latent ball by gradient descent.

    ``step_rule`` is ``'fixed'`` (step ``lr``), ``'backtracking'`` (Armijo,
    starting from ``lr`` and never increasing the objective) or ``'exact'``
    (exact line search, linear rigs only). Returns ``G(z)`` for the best restart.
    """
    A = np.asarray(model.A, dtype=float).reshape(-1, gen.out_dim)
    y = np.asarray(model.y, dtype=float).reshape(-1)
    if step_rule == "exact" and gen.mode != "linear_rig":
        raise ValueError("exact line search needs a linear rig")
    if step_rule not in ("fixed", "backtracking", "exact"):
        raise ValueError(f"unknown step_rule {step_rule!r}")

    def objective(z):
        r = A @ gen(z) - y
        return float(r @ r), r

    best = None
    for restart in range(restarts):
        z = gen.clamp(gen.sample_latents(1, make_rng(seed, "csgm", restart))[0])
        f, r = objective(z)
        trace = [f]
        step = lr
        for _ in range(steps):
            g = 2.0 * gen.vjp(z, A.T @ r)
            gg = float(g @ g)
            if gg == 0.0:
                break
            if step_rule == "fixed":
                z = gen.clamp(z - lr * g)
                f, r = objective(z)
            elif step_rule == "exact":
                ABg = A @ (gen.matrix @ g)
                denom = float(ABg @ ABg)
                if denom == 0.0:
                    break
                z = gen.clamp(z - gg / (2.0 * denom) * g)
                f, r = objective(z)
            else:
                step = min(2.0 * step, lr * 1e6)
                for _ in range(60):
                    z_new = gen.clamp(z - step * g)
                    f_new, r_new = objective(z_new)
                    if f_new <= f - 1e-4 * float(g @ (z - z_new)):
                        break
                    step *= 0.5
                else:
                    break
                z, f, r = z_new, f_new, r_new
            trace.append(f)
        if best is None or f < best.residual:
            x_hat = gen(z)
            err = None if model.x_true is None else relative_error(x_hat, model.x_true)
            best = Recovery(x_hat, z, f, err, trace)
    return best


@dataclass
class SweepTable:
    m: List[int]
    mean_error: List[float]
    std_error: List[float]
    trials: int
    seed: int

    def to_csv(self, path, config_hash=""):
        write_csv(path, ["m", "mean_rel_error", "std_rel_error", "trials"],
                  zip(self.m, self.mean_error, self.std_error, [self.trials] * len(self.m)),
                  [f"seed={self.seed}", f"config_hash={config_hash}"])


def sample_complexity_sweep(gen, n, k, m_list, trials=5, seed=0, noise_std=0.0, **recover_kw):
    """Mean relative CSGM recovery error as a function of the measurement count."""
    m_list = [int(m) for m in m_list]
    if m_list != sorted(m_list):
        raise ValueError("m_list must be sorted ascending")
    if gen.out_dim != n or gen.latent_dim != k:
        raise ValueError(f"generator is {gen.latent_dim}->{gen.out_dim}, expected {k}->{n}")
    means, stds = [], []
    for m in m_list:
        errs = []
        for trial in range(trials):
            z0 = gen.sample_latents(1, make_rng(seed, "sweep-truth", trial))[0]
            x_true = gen(z0)
            model = MeasurementModel.gaussian(x_true, m, noise_std, seed, trial)
            rec = csgm_recover(model, gen, seed=seed + trial, **recover_kw)
            errs.append(rec.recovery_error)
        means.append(float(np.mean(errs)))
        stds.append(float(np.std(errs)))
    return SweepTable(m_list, means, stds, trials, seed)


# -- probes --------------------------------------------------------------------

@dataclass
class CoverageReport:
    d_base: np.ndarray
    d_sum: np.ndarray
    seed: int

    @property
    def improved(self):
        return self.d_sum < self.d_base

    @property
    def coverage(self):
        return float(np.mean(self.improved)) if len(self.d_base) else float("nan")

    def to_csv(self, path, config_hash=""):
        rows = zip(range(len(self.d_base)), self.d_base, self.d_sum, self.improved.astype(int))
        write_csv(path, ["index", "d_base", "d_sum", "improved"], rows,
                  [f"seed={self.seed}", f"coverage={self.coverage!r}", f"config_hash={config_hash}"])


def range_expansion_probe(gen_base, gen_inter, test_set, n_samples=2000, seed=0):
    """Nearest-sample distances under ``G_base`` alone and under the Minkowski sum.

    The sum set is ``{G_base(z1) + G_inter(z2)}``, reusing the base latents
    ``z1`` so that a zero ``G_inter`` reproduces the base distances exactly.
    """
    test_set = np.asarray(test_set, dtype=float).reshape(-1, gen_base.out_dim)
    if gen_inter.out_dim != gen_base.out_dim:
        raise ValueError("generators must share the output dimension")
    if len(test_set) == 0:
        return CoverageReport(np.empty(0), np.empty(0), seed)
    z1 = gen_base.sample_latents(n_samples, make_rng(seed, "probe-base"))
    z2 = gen_inter.sample_latents(n_samples, make_rng(seed, "probe-inter"))
    base = gen_base(z1)
    summed = base + gen_inter(z2)
    _, d_base = pairwise_distances_argmin_min(test_set, base)
    _, d_sum = pairwise_distances_argmin_min(test_set, summed)
    return CoverageReport(d_base, d_sum, seed)


@dataclass
class LipschitzEstimate:
    """A sampled lower bound on the Lipschitz constant (never an upper bound)."""

    L_lower: float
    n_pairs: int


def lipschitz_estimate(gen, n_pairs=1000, seed=0):
    """Largest ``||G(z1) - G(z2)|| / ||z1 - z2||`` over random latent pairs."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = make_rng(seed, "lipschitz")
    z1 = gen.sample_latents(n_pairs, rng)
    z2 = gen.sample_latents(n_pairs, rng)
    dz = np.linalg.norm(z1 - z2, axis=1)
    keep = dz > 0
    dx = np.linalg.norm(gen(z1[keep]) - gen(z2[keep]), axis=1)
    ratio = dx / dz[keep]
    return LipschitzEstimate(float(ratio.max()) if ratio.size else 0.0, n_pairs)


# -- weight divergence -----------------------------------------------------------

def _padded(u, v):
    u = np.ravel(np.asarray(u, dtype=float))
    v = np.ravel(np.asarray(v, dtype=float))
    pad = abs(u.size - v.size)
    n = max(u.size, v.size)
    return np.pad(u, (0, n - u.size)), np.pad(v, (0, n - v.size)), pad


def cosine_similarity(u, v):
    """Cosine between flattened arrays; the shorter one is zero-padded."""
    u, v, _ = _padded(u, v)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroVector("cosine similarity is undefined for an all-zero weight vector")
    return float(u @ v / (nu * nv))


def euclidean_distance(u, v):
    u, v, _ = _padded(u, v)
    return float(np.linalg.norm(u - v))


@dataclass
class WeightDivergence:
    cos_E: float
    cos_D: float
    eucl_E: float
    eucl_D: float
    pad_E: int = 0
    pad_D: int = 0


def weight_divergence(net):
    """Compare the first outer encoder layer with ``E_tau`` and the last decoder layer with ``D_tau``."""
    e, et = net.encoder[0].weight.value, net.inter_encoder[0].weight.value
    d, dt = net.decoder[-1].weight.value, net.inter_decoder[0].weight.value
    return WeightDivergence(cosine_similarity(e, et), cosine_similarity(d, dt),
                            euclidean_distance(e, et), euclidean_distance(d, dt),
                            _padded(e, et)[2], _padded(d, dt)[2])


def config_hash(config):
    """Short stable digest of a JSON-serializable config (embedded in reports)."""
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
