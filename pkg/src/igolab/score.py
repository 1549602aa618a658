"""Score network with an intermediate pathway and the IGO training objective.

The network has an outer pathway ``D . S . E`` and an intermediate pathway
``D_tau . S[tap:] . E_tau`` that shares the tail of the core trunk ``S``.
Training mixes the usual denoising score-matching loss on ``x_t`` with the
regularizer ``R`` evaluated on an iterate ``x_tau`` captured earlier on the
same forward path.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Union

import numpy as np

from . import nn
from ._rng import make_rng
from .exceptions import (DegenerateDiffusion, DivergedTraining, EmptyIterateList,
                         NonFiniteTensor, ZeroVariance)
from .io import write_csv
from .sde import beta_integral, vp_kernel, vp_transition

PATHWAYS = ("final", "intermediate")


class ScoreNet:
    """Time-conditioned MLP score model ``s(x, t)`` with an intermediate pathway.

    Parameters
    ----------
    data_dim : int
        Dimension of the data (input and output width).
    hidden : int
        Width of the core trunk.
    depth : int
        Number of core layers.
    tap_layer : int, optional
        Core layer where the intermediate pathway enters; defaults to
        ``depth // 2``. The intermediate pathway runs core layers
        ``tap_layer .. depth - 1``.
    encoder_layers : int
        Number of layers in the outer encoder ``E``.
    """

    def __init__(self, data_dim, hidden=64, depth=3, tap_layer=None, activation="silu",
                 time_embed_dim=16, encoder_layers=1, seed=0):
        if depth < 1:
            raise ValueError("need at least one core layer")
        tap_layer = depth // 2 if tap_layer is None else int(tap_layer)
        if not 0 <= tap_layer < depth:
            raise ValueError(f"tap_layer must lie in [0, {depth}), got {tap_layer}")
        if activation not in nn.ACTIVATIONS:
            raise ValueError(f"activation must be one of {nn.ACTIVATIONS}")
        self.data_dim = int(data_dim)
        self.hidden = int(hidden)
        self.depth = int(depth)
        self.tap_layer = tap_layer
        self.activation = activation
        self.time_embed_dim = int(time_embed_dim)
        self.encoder_layers = int(encoder_layers)
        self.seed = seed

        rng = make_rng(seed, "init")
        emb = self.time_embed_dim

        def dense(name, n_in, n_out, act):
            return nn.Dense.create(name, n_in, n_out, rng, act, emb)

        widths = [self.data_dim] + [self.hidden] * self.encoder_layers
        self.encoder = [dense(f"E.{i}", a, b, activation) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        self.core = [dense(f"S.{i}", self.hidden, self.hidden, activation) for i in range(self.depth)]
        self.decoder = [dense("D.0", self.hidden, self.data_dim, None)]
        self.inter_encoder = [dense("Etau.0", self.data_dim, self.hidden, activation)]
        self.inter_decoder = [dense("Dtau.0", self.hidden, self.data_dim, None)]
        # E_tau / D_tau start at half the outer layers they mirror.
        for inner, outer in ((self.inter_encoder[0], self.encoder[0]),
                             (self.inter_decoder[0], self.decoder[-1])):
            if inner.weight.shape == outer.weight.shape:
                inner.weight.assign(0.5 * outer.weight.value)
                inner.bias.assign(0.5 * outer.bias.value)

    # -- structure ---------------------------------------------------------

    def groups(self):
        """Parameter groups keyed by role."""
        ps = lambda layers: [p for layer in layers for p in layer.params]
        return {
            "E": ps(self.encoder),
            "S_pre": ps(self.core[:self.tap_layer]),
            "S_post": ps(self.core[self.tap_layer:]),
            "D": ps(self.decoder),
            "E_tau": ps(self.inter_encoder),
            "D_tau": ps(self.inter_decoder),
        }

    @property
    def params(self):
        return [p for group in self.groups().values() for p in group]

    def layers(self, pathway="final"):
        if pathway == "final":
            return self.encoder + self.core + self.decoder
        if pathway == "intermediate":
            return self.inter_encoder + self.core[self.tap_layer:] + self.inter_decoder
        raise ValueError(f"pathway must be one of {PATHWAYS}, got {pathway!r}")

    def generator_layers(self, pathway="final"):
        """Layers of the latent-to-data maps used as generative priors."""
        if pathway == "final":
            return self.layers("final")
        return self.core[self.tap_layer:] + self.inter_decoder

    def forward(self, x, t, pathway="final"):
        return nn.run_layers(self.layers(pathway), x, t)

    def __call__(self, x, t, pathway="final"):
        return self.forward(x, t, pathway)[0]

    def zero_grads(self):
        nn.zero_grads(self.params)

    # -- persistence -------------------------------------------------------

    def config(self):
        return {"data_dim": self.data_dim, "hidden": self.hidden, "depth": self.depth,
                "tap_layer": self.tap_layer, "activation": self.activation,
                "time_embed_dim": self.time_embed_dim, "encoder_layers": self.encoder_layers}

    def save(self, path):
        nn.save_params(path, self.params, meta=self.config())

    @classmethod
    def load(cls, path):
        params, meta = nn.load_params(path)
        net = cls(**meta)
        for dst, src in zip(net.params, params):
            if dst.name != src.name:
                raise ValueError(f"checkpoint order mismatch: {dst.name} vs {src.name}")
            dst.assign(src.value)
        return net

    def copy(self):
        net = ScoreNet(**self.config(), seed=self.seed)
        for dst, src in zip(net.params, self.params):
            dst.assign(src.value)
        return net


@dataclass
class IgoConfig:
    """Training settings: ``alpha`` weighs the standard loss, ``1 - alpha`` weighs R."""

    alpha: float = 0.5
    lambda_schedule: Union[str, Callable] = "constant"
    tau_rule: str = "half_t"
    tau_list: Sequence[float] = ()
    batch_size: int = 128
    steps: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t_min: float = 1e-3
    dt: float = 1e-3
    kernel: str = "gaussian"
    use_regularizer: bool = True
    log_interval: int = 100

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.tau_rule not in ("half_t", "fixed_list"):
            raise ValueError(f"unknown tau_rule {self.tau_rule!r}")
        if self.tau_rule == "fixed_list" and not self.tau_list:
            raise EmptyIterateList("tau_rule='fixed_list' needs a nonempty tau_list")
        if self.kernel not in ("gaussian", "em"):
            raise ValueError(f"kernel must be 'gaussian' or 'em', got {self.kernel!r}")
        if self.batch_size < 1 or self.steps < 0 or self.log_interval < 1:
            raise ValueError("batch_size and log_interval must be positive, steps nonnegative")

    def weight_fn(self, spec=None):
        """The weighting ``lambda(t)`` as a vectorized callable."""
        if callable(self.lambda_schedule):
            return self.lambda_schedule
        if self.lambda_schedule == "constant":
            return lambda t: np.ones_like(np.asarray(t, dtype=float))
        if self.lambda_schedule == "sigma2":
            if spec is None or spec.name != "vp":
                raise ValueError("lambda_schedule='sigma2' needs the closed-form VP kernel")
            bmin, bmax = spec.params["beta_min"], spec.params["beta_max"]
            return lambda t: -np.expm1(-beta_integral(np.asarray(t, dtype=float), bmin, bmax))
        raise ValueError(f"unknown lambda_schedule {self.lambda_schedule!r}")


@dataclass
class TrainBatch:
    x0: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    target_t: np.ndarray
    tau: np.ndarray = None
    xtau: np.ndarray = None
    target_tau: np.ndarray = None

    def __post_init__(self):
        n = len(self.x0)
        for name in ("t", "xt", "target_t", "tau", "xtau", "target_tau"):
            val = getattr(self, name)
            if val is not None and len(val) != n:
                raise ValueError(f"{name} has batch size {len(val)}, expected {n}")

    def intermediate(self):
        """The tau-slice viewed as a standard batch at ``(xtau, tau)``."""
        return TrainBatch(self.x0, self.tau, self.xtau, self.target_tau)


# -- targets -------------------------------------------------------------------

def _col(t, x):
    t = np.asarray(t, dtype=float)
    return t[:, None] if t.ndim == 1 and np.ndim(x) == 2 else t


def dsm_target_gaussian(x0, xt, t, beta_min=0.1, beta_max=20.0):
    """Conditional score ``(mean(x0, t) - xt) / std(t)^2`` of the VP kernel."""
    if np.any(np.asarray(t) <= 0):
        raise ZeroVariance("the conditional score is undefined at t = 0")
    tt = _col(t, xt)
    mean, std = vp_kernel(x0, tt, beta_min, beta_max)
    return (mean - np.asarray(xt, dtype=float)) / std ** 2


def dsm_target_em(x_prev, x_next, t, dt, spec):
    """Score of the one-step EM transition ``N(x_prev + a dt, b^2 dt)`` at ``x_next``."""
    x_prev = np.asarray(x_prev, dtype=float)
    tt = _col(t, x_prev)
    b = spec.b(x_prev, tt)
    if np.any(b == 0):
        raise DegenerateDiffusion("diffusion has a zero entry; the transition has no density")
    mean = x_prev + spec.a(x_prev, tt) * dt
    return (mean - np.asarray(x_next, dtype=float)) / (b ** 2 * dt)


# -- losses --------------------------------------------------------------------

def _weighted_sq_loss(layers, params, x, t, target, weights):
    """Mean ``w_i ||f(x_i, t_i) - target_i||^2``; returns ``(loss, {name: grad})``."""
    nn.zero_grads(params)
    out, tape = nn.run_layers(layers, x, t)
    resid = out - target
    w = np.asarray(weights, dtype=float).reshape(-1, 1)
    n = len(x)
    loss = float(np.sum(w * resid ** 2) / n)
    nn.backward(tape, 2.0 * w * resid / n)
    return loss, {p.name: p.grad.copy() for p in params}


def loss_standard(net, batch, cfg, spec=None):
    """Weighted DSM loss through ``D . S . E``; gradients reach only E, S, D."""
    lam = cfg.weight_fn(spec)(batch.t)
    return _weighted_sq_loss(net.layers("final"), net.params, batch.xt, batch.t,
                             batch.target_t, lam)


def loss_igo(net, batch, cfg, spec=None):
    """The regularizer R: weighted DSM loss of ``D_tau . S[tap:] . E_tau`` on ``(xtau, tau)``."""
    if batch.xtau is None:
        raise ValueError("batch has no intermediate iterates")
    lam = cfg.weight_fn(spec)(batch.tau)
    return _weighted_sq_loss(net.layers("intermediate"), net.params, batch.xtau, batch.tau,
                             batch.target_tau, lam)


def loss_multi(net, batches, cfg, spec=None):
    """Sum of R over one batch slice per captured time."""
    batches = list(batches)
    if not batches:
        raise EmptyIterateList("need at least one intermediate iterate")
    total = 0.0
    grads = None
    for b in batches:
        val, g = loss_igo(net, b, cfg, spec)
        total += val
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    return total, grads


# -- batch assembly ------------------------------------------------------------

def _snap_index(t, dt, lo=1):
    return np.maximum(np.rint(np.asarray(t) / dt).astype(np.int64), lo)


def make_batch(dataset, spec, cfg, rng):
    """Draw a training batch: data, times, corrupted states and score targets.

    Returns one ``TrainBatch`` for ``tau_rule='half_t'`` and a list of batches
    (one per listed tau, sharing ``x0``, ``t``, ``xt``) for ``'fixed_list'``.
    """
    n, d = dataset.shape
    B = cfg.batch_size
    x0 = dataset[rng.integers(0, n, size=B)]
    t = rng.uniform(cfg.t_min, spec.horizon, size=B)
    n_t = _snap_index(t, cfg.dt, lo=2)
    t = n_t * cfg.dt
    if cfg.tau_rule == "half_t":
        tau_idx = [np.maximum(np.rint(n_t / 2).astype(np.int64), 1)]
    else:
        tau_idx = [np.full(B, max(int(np.rint(tau / cfg.dt)), 1)) for tau in cfg.tau_list]

    if cfg.kernel == "gaussian":
        if spec.name != "vp":
            raise ValueError("kernel='gaussian' needs the VP process")
        bmin, bmax = spec.params["beta_min"], spec.params["beta_max"]
        slices = []
        if cfg.tau_rule == "half_t":
            tau = tau_idx[0] * cfg.dt
            m, s = vp_kernel(x0, tau[:, None], bmin, bmax)
            xtau = m + s * rng.standard_normal((B, d))
            m2, s2 = vp_transition(xtau, tau[:, None], t[:, None], bmin, bmax)
            xt = m2 + s2 * rng.standard_normal((B, d))
            slices.append((tau, xtau))
        else:
            m, s = vp_kernel(x0, t[:, None], bmin, bmax)
            xt = m + s * rng.standard_normal((B, d))
            for idx in tau_idx:
                tau = idx * cfg.dt
                m, s = vp_kernel(x0, tau[:, None], bmin, bmax)
                slices.append((tau, m + s * rng.standard_normal((B, d))))
        target_t = dsm_target_gaussian(x0, xt, t, bmin, bmax)
        batches = [TrainBatch(x0, t, xt, target_t, tau, xtau,
                              dsm_target_gaussian(x0, xtau, tau, bmin, bmax))
                   for tau, xtau in slices]
    else:
        stop = np.max(np.stack([n_t] + tau_idx))
        x = x0.astype(float).copy()
        rows = np.arange(B)
        cur = {}
        want = {"t": n_t, **{f"tau{k}": idx for k, idx in enumerate(tau_idx)}}
        prev = {k: np.empty((B, d)) for k in want}
        at = {k: np.empty((B, d)) for k in want}
        sq = np.sqrt(cfg.dt)
        for j in range(int(stop)):
            tj = j * cfg.dt
            x_new = x + spec.a(x, tj) * cfg.dt + spec.b(x, tj) * rng.standard_normal((B, d)) * sq
            for k, idx in want.items():
                hit = rows[idx == j + 1]
                prev[k][hit] = x[hit]
                at[k][hit] = x_new[hit]
            x = x_new
            if not np.isfinite(x).all():
                raise DivergedTraining(-1, f"forward simulation diverged at t={tj}")
        target_t = dsm_target_em(prev["t"], at["t"], t - cfg.dt, cfg.dt, spec)
        batches = []
        for k, idx in enumerate(tau_idx):
            tau = idx * cfg.dt
            tgt = dsm_target_em(prev[f"tau{k}"], at[f"tau{k}"], tau - cfg.dt, cfg.dt, spec)
            batches.append(TrainBatch(x0, t, at["t"], target_t, tau, at[f"tau{k}"], tgt))
    return batches[0] if cfg.tau_rule == "half_t" else batches


# -- training ------------------------------------------------------------------

LOG_COLUMNS = ("step", "loss_total", "loss_std", "loss_R", "cos_E", "cos_D", "eucl_E", "eucl_D")


@dataclass
class TrainLog:
    rows: List[dict] = field(default_factory=list)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path, comments=()):
        write_csv(path, LOG_COLUMNS, ([r[c] for c in LOG_COLUMNS] for r in self.rows), comments)


def train_step(net, batch, cfg, spec, optimizer):
    """One optimizer step on ``alpha * L + (1 - alpha) * R``; returns the three losses."""
    slices = batch if isinstance(batch, list) else [batch]
    l_std, g_std = loss_standard(net, slices[0], cfg, spec)
    with_r = cfg.use_regularizer and cfg.alpha < 1.0
    if with_r:
        if isinstance(batch, list):
            l_r, g_r = loss_multi(net, slices, cfg, spec)
        else:
            l_r, g_r = loss_igo(net, batch, cfg, spec)
        total = cfg.alpha * l_std + (1.0 - cfg.alpha) * l_r
        for p in net.params:
            p.grad[...] = cfg.alpha * g_std[p.name] + (1.0 - cfg.alpha) * g_r[p.name]
    else:
        l_r = float("nan")
        total = cfg.alpha * l_std if cfg.use_regularizer else l_std
        scale = cfg.alpha if cfg.use_regularizer else 1.0
        for p in net.params:
            p.grad[...] = scale * g_std[p.name]
    optimizer.step()
    return total, l_std, l_r


def train(net, dataset, spec, cfg, seed=0, checkpoint_every=None, checkpoint_path=None):
    """Train ``net`` in place on ``dataset`` (shape ``(n, dim)``); returns a ``TrainLog``.

    Each step draws its own counter-based stream, so the random draws do not
    depend on ``alpha`` or on whether the regularizer is enabled.
    """
    from .downstream import weight_divergence

    dataset = np.asarray(dataset, dtype=float)
    if dataset.ndim != 2 or len(dataset) == 0:
        raise ValueError("dataset must be a nonempty (n, dim) array")
    if dataset.shape[1] != net.data_dim or spec.dim != net.data_dim:
        raise ValueError(f"dataset/process dimension must equal net.data_dim={net.data_dim}")
    opt = nn.Adam(net.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    log = TrainLog()
    for step in range(1, cfg.steps + 1):
        batch = make_batch(dataset, spec, cfg, make_rng(seed, "train", step))
        try:
            total, l_std, l_r = train_step(net, batch, cfg, spec, opt)
        except NonFiniteTensor as exc:
            raise DivergedTraining(step, f"non-finite network output at step {step}") from exc
        if not np.isfinite(total):
            raise DivergedTraining(step)
        if step % cfg.log_interval == 0 or step == cfg.steps:
            wd = weight_divergence(net)
            log.rows.append({"step": step, "loss_total": total, "loss_std": l_std, "loss_R": l_r,
                             "cos_E": wd.cos_E, "cos_D": wd.cos_D,
                             "eucl_E": wd.eucl_E, "eucl_D": wd.eucl_D})
        if checkpoint_every and checkpoint_path and step % checkpoint_every == 0:
            net.save(checkpoint_path.format(step=step))
    return log
