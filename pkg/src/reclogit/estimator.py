"""Scikit-learn style front end for the whole model family.

The estimator holds hyperparameters only, so ``get_params`` /
``set_params`` / ``clone`` compose with the wider ecosystem; the training
data (one or more network scenarios with their observed trajectories) is
passed to ``fit``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .context import ModelContext
from .estimation import EstimationConfig, Scenario, as_estimation_data, fit as fit_params
from .exceptions import InputError
from .metrics import evaluate_model
from .model import LINK_SIZE_FEATURE, ModelKind, ModelParams
from .solver import most_probable_route


def _check_fitted(estimator):
    if not hasattr(estimator, "params_"):
        raise NotFittedError("this estimator has not been fitted; call fit first")


class RouteChoiceEstimator(BaseEstimator):
    """Link-based route choice model with a fit/predict surface.

    Parameters
    ----------
    model : str
        One of "rl", "lsrl", "nrl", "resrl", "resdgcnrl".
    features : sequence of str or None
        Systematic feature columns; defaults to every column of the
        training network. The link-size variant appends its flow feature
        automatically.
    n_layers : int
        Residual layers for the hybrid kinds.
    penalty : float
        Weight of the interpretability penalty on residual matrices.
    optimizer, learning_rate, weight_decay, batch_size, max_epochs,
    patience, seed
        Training protocol; ``batch_size=None`` is full batch.
    init_phi : dict or None
        Starting systematic coefficients by feature name (default 0).
    frozen_phi : sequence of str
        Coefficients excluded from optimization.
    mu : float
        Utility scale for the constant-scale kinds.
    scale_features : sequence of str
        Per-link features driving the nested variant's scale.
    ls_coefficients : dict or None
        Fixed coefficients for the link-size flow computation.
    """

    def __init__(
        self,
        model="rl",
        features=None,
        n_layers=1,
        penalty=0.0,
        optimizer="sgd",
        learning_rate=0.1,
        weight_decay=0.0,
        batch_size=None,
        max_epochs=1000,
        patience=None,
        seed=42,
        init_phi=None,
        frozen_phi=None,
        mu=1.0,
        scale_features=None,
        ls_coefficients=None,
    ):
        self.model = model
        self.features = features
        self.n_layers = n_layers
        self.penalty = penalty
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.init_phi = init_phi
        self.frozen_phi = frozen_phi
        self.mu = mu
        self.scale_features = scale_features
        self.ls_coefficients = ls_coefficients

    def _initial_params(self, data) -> ModelParams:
        kind = ModelKind.coerce(self.model)
        features = data[0].features
        names = list(self.features) if self.features is not None else list(features.names)
        if kind is ModelKind.LSRL and LINK_SIZE_FEATURE not in names:
            names.append(LINK_SIZE_FEATURE)
        init_phi = dict(self.init_phi or {})
        unknown = set(init_phi) - set(names)
        if unknown:
            raise InputError(f"init_phi names {sorted(unknown)} not among features {names}")
        phi = np.array([float(init_phi.get(n, 0.0)) for n in names])
        n = data[0].graph.link_count
        theta = ()
        if kind in (ModelKind.RESRL, ModelKind.RESDGCNRL):
            theta = tuple(np.zeros((n, n)) for _ in range(int(self.n_layers)))
        scale_names = tuple(self.scale_features or ())
        return ModelParams(
            model_kind=kind,
            phi=phi,
            phi_names=tuple(names),
            mu=self.mu,
            theta=theta,
            nrl_gamma=np.zeros(len(scale_names)),
            nrl_gamma_names=scale_names,
            frozen_phi=frozenset(self.frozen_phi or ()),
        )

    def fit(self, X, y=None):
        """Fit on a Scenario or list of Scenarios; y is ignored."""
        data = as_estimation_data(X)
        init = self._initial_params(data)
        config = EstimationConfig(
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            lam=self.penalty,
            seed=self.seed,
        )
        result = fit_params(data, init, config, ls_coefficients=self.ls_coefficients)
        self.params_ = result.params
        self.result_ = result
        self.history_ = result.history
        return self

    def _context(self, scenario: Scenario) -> ModelContext:
        _check_fitted(self)
        return ModelContext(
            scenario.graph,
            scenario.features,
            self.params_,
            prox=scenario.prox if self.params_.model_kind is ModelKind.RESDGCNRL else None,
            ls_coefficients=self.ls_coefficients,
        )

    def predict_proba(self, X):
        """Per-trajectory path probabilities, concatenated over scenarios."""
        out = []
        for scenario in as_estimation_data(X):
            ctx = self._context(scenario)
            out.extend(
                np.exp(ctx.trajectory_log_probability(p)) for p in scenario.trajectories.paths
            )
        return np.asarray(out)

    def predict(self, X, od_pairs=None, max_steps=None):
        """Greedy most-probable routes per scenario.

        With ``od_pairs`` (a list per scenario, or one shared list) routes
        are generated for those pairs; otherwise for the OD pair of every
        observed trajectory.
        """
        data = as_estimation_data(X)
        routes = []
        for s_idx, scenario in enumerate(data):
            ctx = self._context(scenario)
            if od_pairs is None:
                pairs = [(p[0], p[-1]) for p in scenario.trajectories.paths]
            elif isinstance(od_pairs[0], tuple):
                pairs = od_pairs
            else:
                pairs = od_pairs[s_idx]
            for origin, dest in pairs:
                cm = ctx.choices(dest, origin)
                routes.append(most_probable_route(cm, origin, dest, max_steps))
        return routes

    def score(self, X, y=None):
        """Mean per-trajectory log-likelihood (higher is better)."""
        data = as_estimation_data(X)
        total, count = 0.0, 0
        for scenario in data:
            ctx = self._context(scenario)
            for p in scenario.trajectories.paths:
                total += ctx.trajectory_log_probability(p)
                count += 1
        return total / max(count, 1)

    def report(self, X):
        """MetricsReport for every scenario in X, as a list."""
        return [
            evaluate_model(s.trajectories, self._context(s)) for s in as_estimation_data(X)
        ]
