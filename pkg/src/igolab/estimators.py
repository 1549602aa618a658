"""scikit-learn compatible estimators over the functional core.

``IgoScoreModel`` fits a score network with the intermediate regularizer and
samples from it; ``GenerativePCA`` runs the projected power method on the
data covariance; ``CSGM`` recovers a signal from linear measurements under a
generative prior.
"""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._rng import make_rng
from .downstream import Generator, csgm_recover, ppower, weight_divergence
from .sampling import SamplerConfig, probability_flow_sample, reverse_em
from .score import IgoConfig, ScoreNet, train
from .sde import EmConfig, make_process, simulate_ensemble


class IgoScoreModel(BaseEstimator):
    """Score-based generative model trained with the intermediate-iterate regularizer.

    Parameters
    ----------
    process : {'vp', 'ou', 'lotka_volterra', 'cat_map'}
        Forward corruption process.
    process_params : dict, optional
        Keyword arguments for the process constructor.
    alpha : float
        Weight of the standard loss; ``1 - alpha`` weighs the regularizer.
    kernel : {'gaussian', 'em'}
        How corrupted states and score targets are produced. ``'gaussian'``
        uses the closed-form VP transition, ``'em'`` simulates the process and
        regresses on one-step transition scores.
    random_state : int
        Root seed; every random draw derives from it.
    """

    def __init__(self, process="vp", process_params=None, hidden=64, depth=3, tap_layer=None,
                 activation="silu", time_embed_dim=16, alpha=0.5, lambda_schedule="constant",
                 tau_rule="half_t", tau_list=(), kernel="gaussian", batch_size=128, steps=2000,
                 lr=1e-3, dt=1e-3, t_min=1e-3, log_interval=100, use_regularizer=True,
                 random_state=0):
        self.process = process
        self.process_params = process_params
        self.hidden = hidden
        self.depth = depth
        self.tap_layer = tap_layer
        self.activation = activation
        self.time_embed_dim = time_embed_dim
        self.alpha = alpha
        self.lambda_schedule = lambda_schedule
        self.tau_rule = tau_rule
        self.tau_list = tau_list
        self.kernel = kernel
        self.batch_size = batch_size
        self.steps = steps
        self.lr = lr
        self.dt = dt
        self.t_min = t_min
        self.log_interval = log_interval
        self.use_regularizer = use_regularizer
        self.random_state = random_state

    def _igo_config(self):
        return IgoConfig(alpha=self.alpha, lambda_schedule=self.lambda_schedule,
                         tau_rule=self.tau_rule, tau_list=tuple(self.tau_list),
                         batch_size=self.batch_size, steps=self.steps, lr=self.lr,
                         t_min=self.t_min, dt=self.dt, kernel=self.kernel,
                         use_regularizer=self.use_regularizer, log_interval=self.log_interval)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=1)
        self.n_features_in_ = X.shape[1]
        self.sde_ = make_process(self.process, dim=X.shape[1], **(self.process_params or {}))
        if self.sde_.dim != X.shape[1]:
            raise ValueError(f"process {self.process!r} is {self.sde_.dim}-D, data is {X.shape[1]}-D")
        self.net_ = ScoreNet(X.shape[1], self.hidden, self.depth, self.tap_layer, self.activation,
                             self.time_embed_dim, seed=self.random_state)
        self.log_ = train(self.net_, X, self.sde_, self._igo_config(), seed=self.random_state)
        self.X_fit_ = X
        return self

    def predict_score(self, X, t, pathway="final"):
        """Evaluate the learned score at ``(X, t)``."""
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        return self.net_(X, np.broadcast_to(np.asarray(t, dtype=float), (len(X),)), pathway)

    def prior_sample(self, n_samples, t_start=None, random_state=None):
        """Draw starting states at ``t_start`` (default: the horizon).

        The VP process at its horizon uses ``N(0, I)``; otherwise training
        points are pushed forward through the simulated process.
        """
        check_is_fitted(self, "net_")
        seed = self.random_state if random_state is None else random_state
        t0 = self.sde_.horizon if t_start is None else t_start
        rng = make_rng(seed, "prior")
        if self.sde_.name == "vp" and t0 == self.sde_.horizon:
            return rng.standard_normal((n_samples, self.n_features_in_))
        x0 = self.X_fit_[rng.integers(0, len(self.X_fit_), n_samples)]
        spec = make_process(self.process, dim=self.n_features_in_,
                            **{**(self.process_params or {}), "horizon": t0})
        return simulate_ensemble(spec, x0, EmConfig(self.dt, seed=seed), n_samples).final

    def sample(self, n_samples, method="reverse_em", pathway="final", t_start=None,
               n_steps=500, rtol=1e-4, atol=1e-4, random_state=None):
        """Generate ``n_samples`` by reverse EM or the probability-flow ODE."""
        check_is_fitted(self, "net_")
        seed = self.random_state if random_state is None else random_state
        cfg = SamplerConfig(n_steps=n_steps, t_start=t_start, t_min=self.t_min, pathway=pathway,
                            rtol=rtol, atol=atol, seed=seed)
        x_T = self.prior_sample(n_samples, cfg.start(self.sde_), seed)
        if method == "reverse_em":
            return reverse_em(self.net_, self.sde_, x_T, cfg)
        if method == "ode":
            return probability_flow_sample(self.net_, self.sde_, x_T, cfg)
        raise ValueError(f"unknown sampling method {method!r}")

    def weight_divergence(self):
        check_is_fitted(self, "net_")
        return weight_divergence(self.net_)

    def generator(self, pathway="final", radius=10.0):
        """The fitted network as a latent-to-data ``Generator``."""
        check_is_fitted(self, "net_")
        return Generator.from_net(self.net_, pathway, self.t_min, radius)


class GenerativePCA(TransformerMixin, BaseEstimator):
    """Leading principal direction restricted to a generator's range.

    With ``generator=None`` the identity generator is used and the estimator
    reduces to the classic power method on the sample covariance.
    """

    def __init__(self, generator=None, n_iter=50, projection_steps=100, projection_lr=1e-3,
                 center=True, random_state=0):
        self.generator = generator
        self.n_iter = n_iter
        self.projection_steps = projection_steps
        self.projection_lr = projection_lr
        self.center = center
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        self.n_features_in_ = X.shape[1]
        self.mean_ = X.mean(axis=0) if self.center else np.zeros(X.shape[1])
        Xc = X - self.mean_
        self.covariance_ = Xc.T @ Xc / len(X)
        gen = self.generator
        if gen is None:
            gen = Generator.linear_rig(np.eye(X.shape[1]), radius=np.inf)
        v = ppower(self.covariance_, gen, iters=self.n_iter, seed=self.random_state,
                   steps=self.projection_steps, lr=self.projection_lr)
        self.components_ = v[None, :]
        self.explained_variance_ = np.array([v @ self.covariance_ @ v])
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_.T


class CSGM(BaseEstimator):
    """Compressed sensing with a generative prior: ``fit(A, y)`` recovers ``x``."""

    def __init__(self, generator, steps=500, lr=1.0, restarts=1, step_rule="backtracking",
                 random_state=0):
        self.generator = generator
        self.steps = steps
        self.lr = lr
        self.restarts = restarts
        self.step_rule = step_rule
        self.random_state = random_state

    def fit(self, A, y):
        from .downstream import MeasurementModel

        A = np.asarray(A, dtype=np.float64).reshape(-1, self.generator.out_dim)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if len(y) != len(A):
            raise ValueError(f"A has {len(A)} rows but y has {len(y)} entries")
        rec = csgm_recover(MeasurementModel(A, y), self.generator, self.steps, self.lr,
                           self.restarts, self.random_state, self.step_rule)
        self.x_hat_ = rec.x_hat
        self.z_ = rec.z
        self.residual_ = rec.residual
        return self

    def predict(self, A):
        check_is_fitted(self, "x_hat_")
        return np.asarray(A, dtype=np.float64) @ self.x_hat_
