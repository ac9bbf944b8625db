"""Maximum-likelihood estimation with an interpretability-penalized loss.

The loss is -LL + lambda * sum_m ||theta_m||_F: the penalty term rewards
models that lean on the systematic component instead of the residual
weight matrices. Gradients are analytic. The value-function term is
handled through the adjoint of the same linear system used for the value
solve, so no matrix inverse is ever differentiated explicitly; the
residual stack is differentiated by backward recursion over its cached
layer inputs. A central finite-difference oracle over the flattened
parameter vector is provided for verification, and is also how the nested
variant (a handful of scalar parameters) gets its gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.special import expit

from .exceptions import (
    DimensionError,
    DivergenceError,
    InputError,
    SingularInformationError,
)
from .io import TrajectorySet
from .model import (
    LINK_SIZE_FEATURE,
    FeatureTensor,
    ModelKind,
    ModelParams,
    UtilityField,
    nrl_scale,
    utility_field,
)
from .network import LinkGraph, ProximitySet, build_proximities
from .solver import solve_value_nrl, transition_weights

logger = logging.getLogger(__name__)

ANALYTIC_KINDS = (ModelKind.RL, ModelKind.LSRL, ModelKind.RESRL, ModelKind.RESDGCNRL)


class Scenario:
    """One network state with the trajectories observed on it.

    A dataset is a list of scenarios; the toy fixture, for instance, pairs
    the full network with the observations collected before a link removal
    and the reduced network with the observations collected after.
    """

    def __init__(self, graph: LinkGraph, features: FeatureTensor, trajectories: TrajectorySet,
                 name: str = ""):
        trajectories.validate(graph)
        self.graph = graph
        self.features = features
        self.trajectories = trajectories
        self.name = name
        self._prox: ProximitySet | None = None
        self._groups: dict = {}

    @property
    def prox(self) -> ProximitySet:
        if self._prox is None:
            self._prox = build_proximities(self.graph)
        return self._prox


def as_estimation_data(data) -> list[Scenario]:
    if isinstance(data, Scenario):
        return [data]
    data = list(data)
    if not data or not all(isinstance(s, Scenario) for s in data):
        raise InputError("estimation data must be a Scenario or a non-empty list of Scenarios")
    return data


@dataclass
class EstimationConfig:
    """Training protocol knobs; everything is overridable.

    ``batch_size=None`` means full-batch updates, which are deterministic
    given the seed. ``patience`` enables early stopping on validation loss
    when the data has a validation split.
    """

    optimizer: str = "sgd"
    learning_rate: float = 0.1
    weight_decay: float = 0.0
    batch_size: int | None = None
    max_epochs: int = 1000
    patience: int | None = None
    lam: float = 0.0
    seed: int = 42
    compute_std_errors: bool = False
    loss_normalization: str = "trajectories"

    def __post_init__(self):
        if self.loss_normalization not in ("trajectories", "none"):
            raise InputError(
                f"loss_normalization must be 'trajectories' or 'none', got {self.loss_normalization!r}"
            )
        if self.lam < 0:
            raise InputError(f"penalty coefficient must be nonnegative, got {self.lam}")
        if self.optimizer not in ("sgd", "adam"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise InputError("learning rate must be positive")

    def to_dict(self) -> dict:
        return {
            "optimizer": self.optimizer,
            "lr": self.learning_rate,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "lambda": self.lam,
            "seed": self.seed,
            "loss_normalization": self.loss_normalization,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EstimationConfig":
        d = dict(d)
        known = {
            "optimizer": "optimizer",
            "lr": "learning_rate",
            "learning_rate": "learning_rate",
            "weight_decay": "weight_decay",
            "batch_size": "batch_size",
            "max_epochs": "max_epochs",
            "patience": "patience",
            "lambda": "lam",
            "seed": "seed",
            "compute_std_errors": "compute_std_errors",
            "loss_normalization": "loss_normalization",
        }
        kwargs = {}
        for key, value in d.items():
            if key in known:
                kwargs[known[key]] = value
        return cls(**kwargs)


@dataclass(frozen=True)
class LossReport:
    """Loss decomposition at one parameter vector."""

    ll: float
    ei: float
    lam: float
    per_trajectory: tuple[float, ...] | None = None

    @property
    def loss(self) -> float:
        return -self.ll - self.lam * self.ei


class ParameterSpace:
    """Flat view of a ModelParams with a stable coordinate ordering.

    Order: systematic coefficients, then each residual layer row-major,
    then the proximity scalars (graph-convolutional kind only), then the
    scale coefficients (nested kind only). Frozen coefficients keep their
    slot but are masked out of updates and gradients.
    """

    def __init__(self, template: ModelParams):
        self.template = template
        kind = template.model_kind
        self.n_phi = len(template.phi)
        self.theta_shapes = [t.shape for t in template.theta]
        self.has_prox_scalars = kind is ModelKind.RESDGCNRL
        self.n_nrl = len(template.nrl_gamma) if kind is ModelKind.NRL else 0
        size = self.n_phi + sum(s[0] * s[1] for s in self.theta_shapes)
        if self.has_prox_scalars:
            size += 3
        size += self.n_nrl
        self.size = size
        free = np.ones(size, dtype=bool)
        for i, name in enumerate(template.phi_names):
            if name in template.frozen_phi:
                free[i] = False
        self.free = free

    def names(self) -> list[str]:
        out = [f"phi.{n}" for n in self.template.phi_names]
        for m, shape in enumerate(self.theta_shapes, start=1):
            out += [f"theta{m}[{i},{j}]" for i in range(shape[0]) for j in range(shape[1])]
        if self.has_prox_scalars:
            out += ["alpha", "beta", "gamma"]
        out += [f"nrl_gamma.{n}" for n in self.template.nrl_gamma_names]
        return out

    def flatten(self, params: ModelParams) -> np.ndarray:
        parts = [np.asarray(params.phi, float)]
        parts += [t.ravel() for t in params.theta]
        if self.has_prox_scalars:
            parts.append(np.array([params.alpha, params.beta, params.gamma]))
        if self.n_nrl:
            parts.append(np.asarray(params.nrl_gamma, float))
        vec = np.concatenate(parts) if parts else np.zeros(0)
        if vec.shape[0] != self.size:
            raise DimensionError("parameter vector does not match this space")
        return vec

    def unflatten(self, vec: np.ndarray) -> ModelParams:
        vec = np.asarray(vec, float)
        if vec.shape != (self.size,):
            raise DimensionError(f"expected vector of length {self.size}, got {vec.shape}")
        pos = self.n_phi
        phi = vec[:pos]
        theta = []
        for shape in self.theta_shapes:
            count = shape[0] * shape[1]
            theta.append(vec[pos : pos + count].reshape(shape))
            pos += count
        kwargs = {}
        if self.has_prox_scalars:
            kwargs["alpha"], kwargs["beta"], kwargs["gamma"] = vec[pos : pos + 3]
            pos += 3
        if self.n_nrl:
            kwargs["nrl_gamma"] = vec[pos : pos + self.n_nrl]
        return self.template.replace(phi=phi, theta=tuple(theta), **kwargs)


@dataclass
class GradientVector:
    """Gradient of the loss in the same layout as ParameterSpace."""

    space: ParameterSpace
    d_phi: np.ndarray
    d_theta: tuple[np.ndarray, ...] = ()
    d_alpha: float = 0.0
    d_beta: float = 0.0
    d_gamma: float = 0.0
    d_nrl_gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_flat(self) -> np.ndarray:
        parts = [self.d_phi]
        parts += [t.ravel() for t in self.d_theta]
        if self.space.has_prox_scalars:
            parts.append(np.array([self.d_alpha, self.d_beta, self.d_gamma]))
        if self.space.n_nrl:
            parts.append(self.d_nrl_gamma)
        flat = np.concatenate(parts) if parts else np.zeros(0)
        flat = np.where(self.space.free, flat, 0.0)
        return flat

    @classmethod
    def from_flat(cls, space: ParameterSpace, flat: np.ndarray) -> "GradientVector":
        flat = np.where(space.free, np.asarray(flat, float), 0.0)
        pos = space.n_phi
        d_phi = flat[:pos].copy()
        d_theta = []
        for shape in space.theta_shapes:
            count = shape[0] * shape[1]
            d_theta.append(flat[pos : pos + count].reshape(shape))
            pos += count
        d_alpha = d_beta = d_gamma = 0.0
        if space.has_prox_scalars:
            d_alpha, d_beta, d_gamma = flat[pos : pos + 3]
            pos += 3
        d_nrl = flat[pos : pos + space.n_nrl].copy() if space.n_nrl else np.zeros(0)
        return cls(space, d_phi, tuple(d_theta), d_alpha, d_beta, d_gamma, d_nrl)


@dataclass
class _Group:
    """Trajectories of one scenario sharing a value solve."""

    destination: int
    origin: int | None
    traj_indices: np.ndarray
    step_k: np.ndarray
    step_a: np.ndarray
    step_traj: np.ndarray
    origins: np.ndarray


def _prepare_groups(scenario: Scenario, od_specific: bool, indices) -> list[_Group]:
    key = (od_specific, tuple(indices))
    cached = scenario._groups.get(key)
    if cached is not None:
        return cached
    buckets: dict = {}
    for idx in indices:
        path = scenario.trajectories.paths[idx]
        if path[-1] in path[:-1]:
            raise InputError(
                f"trajectory {scenario.trajectories.ids[idx]!r} revisits its destination link"
            )
        gk = (path[-1], path[0]) if od_specific else (path[-1], None)
        buckets.setdefault(gk, []).append(idx)
    groups = []
    for (dest, origin), members in sorted(buckets.items()):
        k_parts, a_parts, t_parts, origins = [], [], [], []
        for slot, idx in enumerate(members):
            path = scenario.trajectories.paths[idx]
            origins.append(path[0])
            if len(path) > 1:
                arr = np.asarray(path, dtype=int)
                k_parts.append(arr[:-1])
                a_parts.append(arr[1:])
                t_parts.append(np.full(len(path) - 1, slot, dtype=int))
        cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, dtype=int)
        groups.append(
            _Group(
                destination=dest,
                origin=origin,
                traj_indices=np.asarray(members, dtype=int),
                step_k=cat(k_parts),
                step_a=cat(a_parts),
                step_traj=cat(t_parts),
                origins=np.asarray(origins, dtype=int),
            )
        )
    scenario._groups[key] = groups
    return groups


def _split_indices(trajs: TrajectorySet, split) -> list[int]:
    if split is None:
        return list(range(len(trajs)))
    return [i for i, s in enumerate(trajs.splits) if s == split]


def _ls_matrix(scenario: Scenario, ls_coefficients: dict, origin: int, destination: int,
               cache: dict) -> np.ndarray:
    from .solver import link_size_attribute

    key = (id(scenario), origin, destination)
    if key not in cache:
        ls = link_size_attribute(scenario.graph, scenario.features, ls_coefficients,
                                 origin, destination)
        cache[key] = scenario.graph.adjacency * ls[None, :]
    return cache[key]


class Evaluator:
    """Loss and gradient evaluation over a list of scenarios.

    Holds the per-OD link-size feature cache (those depend only on the
    network and the fixed coefficients, never on the fitted parameters),
    so repeated evaluations during training do not recompute them.
    """

    def __init__(self, data, ls_coefficients: dict | None = None):
        self.data = as_estimation_data(data)
        self.ls_coefficients = dict(ls_coefficients or {})
        self._ls_cache: dict = {}

    def _scenario_indices(self, scenario: Scenario, split):
        return _split_indices(scenario.trajectories, split)

    def evaluate(
        self,
        params: ModelParams,
        lam: float = 0.0,
        need_grad: bool = False,
        split=None,
        batches: list | None = None,
        keep_per_trajectory: bool = False,
    ):
        """Return (LossReport, GradientVector | None).

        ``batches`` optionally restricts evaluation to explicit
        per-scenario trajectory index lists (one entry per scenario).
        """
        kind = params.model_kind
        if need_grad and kind not in ANALYTIC_KINDS:
            raise InputError(
                f"analytic gradients are unavailable for {kind.value}; "
                "use finite_difference_gradient"
            )
        if kind is ModelKind.LSRL and not self.ls_coefficients:
            raise InputError("the link-size variant needs fixed coefficients for the flow feature")
        mu = params.mu
        total_ll = 0.0
        per_traj: dict = {}
        space = ParameterSpace(params) if need_grad else None
        d_phi = np.zeros(len(params.phi))
        d_theta = [np.zeros_like(t) for t in params.theta]
        d_scalars = np.zeros(3)
        for s_idx, scenario in enumerate(self.data):
            params.validate_for(scenario.graph, scenario.features)
            indices = batches[s_idx] if batches is not None else self._scenario_indices(scenario, split)
            if len(indices) == 0:
                continue
            prox = scenario.prox if kind is ModelKind.RESDGCNRL else None
            field_s = _base_field(scenario, params, prox)
            h = field_s.h
            groups = _prepare_groups(scenario, kind is ModelKind.LSRL, indices)
            adjoint_sum = np.zeros_like(h) if need_grad else None
            mu_vec = nrl_scale(scenario.features, params) if kind is ModelKind.NRL else None
            for group in groups:
                h_eff = h
                ls_feature = None
                if kind is ModelKind.LSRL:
                    ls_feature = _ls_matrix(
                        scenario, self.ls_coefficients, group.origin, group.destination, self._ls_cache
                    )
                    h_eff = h + params.phi_value(LINK_SIZE_FEATURE) * ls_feature
                if kind is ModelKind.NRL:
                    value = solve_value_nrl(scenario.graph, h_eff, mu_vec, group.destination)
                    lls = _group_ll_per_step(group, h_eff, value.V, mu_vec)
                    total_ll += float(lls.sum())
                else:
                    weights = transition_weights(scenario.graph, h_eff, mu, group.destination)
                    system = np.eye(h.shape[0]) - weights
                    factor = lu_factor(system)
                    rhs = np.zeros(h.shape[0])
                    rhs[group.destination] = 1.0
                    z = lu_solve(factor, rhs)
                    lls = _group_ll_telescoped(group, h_eff, z, mu)
                    total_ll += float(lls.sum())
                    if need_grad:
                        if not np.isfinite(lls).all():
                            raise DivergenceError(
                                "log-likelihood is non-finite at the current parameters"
                            )
                        e_group = _group_adjoint(group, weights, factor, z, h.shape[0])
                        if kind is ModelKind.LSRL:
                            for q, name in enumerate(params.phi_names):
                                x_q = (
                                    ls_feature
                                    if name == LINK_SIZE_FEATURE
                                    else scenario.features.matrix(name)
                                )
                                d_phi[q] -= float(np.sum(e_group * x_q)) / mu
                        else:
                            adjoint_sum += e_group
                if keep_per_trajectory:
                    for slot, t_idx in enumerate(group.traj_indices):
                        per_traj[(s_idx, int(t_idx))] = float(lls[slot])
            if need_grad and kind is not ModelKind.LSRL:
                adjoint = -adjoint_sum / mu
                phi_part, theta_part, scalar_part = _backward(
                    field_s, params, scenario, prox, adjoint
                )
                d_phi += phi_part
                for m in range(len(d_theta)):
                    d_theta[m] += theta_part[m]
                d_scalars += scalar_part
        ei = ei_penalty(params)
        breakdown = None
        if keep_per_trajectory:
            breakdown = tuple(per_traj[k] for k in sorted(per_traj))
        report = LossReport(ll=total_ll, ei=ei, lam=lam, per_trajectory=breakdown)
        if not need_grad:
            return report, None
        for m, theta in enumerate(params.theta):
            norm = float(np.linalg.norm(theta))
            if norm > 0:
                d_theta[m] += lam * theta / norm
        grad = GradientVector(
            space,
            np.where([n in params.frozen_phi for n in params.phi_names], 0.0, d_phi),
            tuple(d_theta),
            *d_scalars,
        )
        return report, grad


def _base_field(scenario: Scenario, params: ModelParams, prox) -> UtilityField:
    base = params
    if params.model_kind is ModelKind.LSRL:
        keep = [n for n in params.phi_names if n != LINK_SIZE_FEATURE]
        base = params.replace(
            model_kind=ModelKind.RL,
            phi=np.array([params.phi_value(n) for n in keep]),
            phi_names=tuple(keep),
            frozen_phi=frozenset(params.frozen_phi) - {LINK_SIZE_FEATURE},
        )
    elif params.model_kind is ModelKind.NRL:
        base = params.replace(model_kind=ModelKind.RL, nrl_gamma=np.zeros(0), nrl_gamma_names=())
    return utility_field(scenario.graph, scenario.features, base, prox)


def _group_ll_telescoped(group: _Group, h: np.ndarray, z: np.ndarray, mu: float) -> np.ndarray:
    n_traj = len(group.traj_indices)
    step_sum = np.bincount(
        group.step_traj, weights=h[group.step_k, group.step_a], minlength=n_traj
    ) if group.step_k.size else np.zeros(n_traj)
    z_origin = z[group.origins]
    if (z_origin <= 0).any() or not np.isfinite(z_origin).all():
        return np.full(n_traj, -np.inf)
    return (step_sum - mu * np.log(z_origin)) / mu


def _group_ll_per_step(group: _Group, h: np.ndarray, V: np.ndarray, mu_vec: np.ndarray) -> np.ndarray:
    n_traj = len(group.traj_indices)
    if not group.step_k.size:
        return np.zeros(n_traj)
    k, a = group.step_k, group.step_a
    scores = (h[k, a] + V[a] - V[k]) / mu_vec[k]
    return np.bincount(group.step_traj, weights=scores, minlength=n_traj)


def _group_adjoint(group: _Group, weights, factor, z, n) -> np.ndarray:
    """Count matrix minus the value-derivative weights for one group.

    Pairing this matrix with d h / d p gives mu * d LL / d p restricted
    to the group. The value term solves the transposed system once for
    all origins and every parameter.
    """
    counts = np.zeros((n, n))
    if group.step_k.size:
        np.add.at(counts, (group.step_k, group.step_a), 1.0)
    origin_counts = np.bincount(group.origins, minlength=n).astype(float)
    rhs = np.divide(origin_counts, z, out=np.zeros(n), where=origin_counts > 0)
    u = lu_solve(factor, rhs, trans=1)
    return counts - (u[:, None] * weights) * z[None, :]


def _backward(field: UtilityField, params: ModelParams, scenario: Scenario, prox, adjoint):
    """Backpropagate d Loss / d h through the residual stack.

    Returns the systematic-coefficient part, per-layer weight-matrix
    parts, and the three proximity-scalar parts.
    """
    mask = scenario.graph.adjacency
    kind = params.model_kind
    theta_grads = [np.zeros_like(t) for t in params.theta]
    scalars = np.zeros(3)
    operator = None
    if kind is ModelKind.RESDGCNRL:
        operator = prox.combined(params.alpha, params.beta, params.gamma)
    for m in reversed(range(params.n_layers)):
        x = field.preactivations[m]
        h_prev = field.hidden[m]
        g = adjoint * mask * expit(x)
        theta = params.theta[m]
        if kind is ModelKind.RESRL:
            theta_grads[m] = -(h_prev.T @ g)
            adjoint = adjoint - g @ theta.T
        else:
            sh = operator @ h_prev
            theta_grads[m] = -(sh.T @ g)
            ht = h_prev @ theta
            scalars[0] -= float(np.sum(g * (prox.z_first @ ht)))
            scalars[1] -= float(np.sum(g * (prox.z_second_in @ ht)))
            scalars[2] -= float(np.sum(g * (prox.z_second_out @ ht)))
            adjoint = adjoint - operator.T @ (g @ theta.T)
    d_phi = np.zeros(len(params.phi))
    for q, name in enumerate(params.phi_names):
        if name == LINK_SIZE_FEATURE and kind is ModelKind.LSRL:
            continue
        d_phi[q] = float(np.sum(adjoint * scenario.features.matrix(name)))
    return d_phi, theta_grads, scalars


def utility_gradient_wrt_phi(
    field: UtilityField,
    params: ModelParams,
    graph: LinkGraph,
    features: FeatureTensor,
    prox: ProximitySet | None,
    q: int,
):
    """Forward-mode derivative of the total utility w.r.t. one coefficient.

    Returns the total derivative matrix together with the per-layer
    increments; the total is the raw feature matrix plus the sum of the
    increments, which is what makes deep stacks keep a direct gradient
    path to the systematic coefficients.
    """
    mask = graph.adjacency
    dh = features.matrices[q].copy()
    increments = []
    operator = None
    if params.model_kind is ModelKind.RESDGCNRL:
        operator = prox.combined(params.alpha, params.beta, params.gamma)
    for m in range(params.n_layers):
        x = field.preactivations[m]
        dx = dh @ params.theta[m]
        if operator is not None:
            dx = operator @ dx
        d_inc = -(expit(x) * mask) * dx
        increments.append(d_inc)
        dh = dh + d_inc
    return dh, increments


def ei_penalty(params: ModelParams) -> float:
    """Interpretability score: negated sum of layer-wise Frobenius norms.

    Zero for models without residual weight matrices; always nonpositive.
    """
    return -sum(float(np.linalg.norm(t)) for t in params.theta)


def log_likelihood(data, params: ModelParams, split=None, ls_coefficients=None) -> float:
    """Total log-likelihood of the observed link transitions."""
    report, _ = Evaluator(data, ls_coefficients).evaluate(params, split=split)
    return report.ll


def loss_report(data, params: ModelParams, lam: float = 0.0, split=None,
                ls_coefficients=None, keep_per_trajectory=False) -> LossReport:
    report, _ = Evaluator(data, ls_coefficients).evaluate(
        params, lam=lam, split=split, keep_per_trajectory=keep_per_trajectory
    )
    return report


def analytic_gradient(data, params: ModelParams, lam: float = 0.0, split=None,
                      ls_coefficients=None) -> GradientVector:
    """Exact loss gradient for the kinds with a closed-form recursion.

    The nested kind falls back to central finite differences over its
    scalar parameters.
    """
    if params.model_kind is ModelKind.NRL:
        return finite_difference_gradient(data, params, lam, split=split,
                                          ls_coefficients=ls_coefficients)
    _, grad = Evaluator(data, ls_coefficients).evaluate(
        params, lam=lam, need_grad=True, split=split
    )
    return grad


def finite_difference_gradient(
    data,
    params: ModelParams,
    lam: float = 0.0,
    step_scale: float = 1e-6,
    coords: Sequence[int] | None = None,
    split=None,
    ls_coefficients=None,
) -> GradientVector:
    """Central differences of the loss over the flat parameter vector.

    ``coords`` restricts differencing to selected flat indices (useful
    for sampling weight-matrix entries); unselected coordinates come back
    zero. The step is step_scale * max(1, |value|) per coordinate.
    """
    evaluator = Evaluator(data, ls_coefficients)

    def loss_at(p):
        report, _ = evaluator.evaluate(p, lam=lam, split=split)
        return report.loss

    return _central_differences(params, loss_at, step_scale, coords)


def _central_differences(params, loss_at, step_scale, coords=None) -> GradientVector:
    space = ParameterSpace(params)
    base = space.flatten(params)
    if coords is None:
        coords = range(space.size)
    flat = np.zeros(space.size)
    for i in coords:
        if not space.free[i]:
            continue
        step = step_scale * max(1.0, abs(base[i]))
        up = base.copy()
        up[i] += step
        down = base.copy()
        down[i] -= step
        flat[i] = (loss_at(space.unflatten(up)) - loss_at(space.unflatten(down))) / (2 * step)
    return GradientVector.from_flat(space, flat)


def _fd_on_batches(evaluator, data, params, lam, batches, ls_coefficients,
                   step_scale: float = 1e-6) -> GradientVector:
    def loss_at(p):
        report, _ = evaluator.evaluate(p, lam=lam, batches=batches)
        return report.loss

    return _central_differences(params, loss_at, step_scale)


@dataclass
class FitResult:
    """Outcome of one training run.

    ``params`` is the best-validation checkpoint when early stopping is
    active, otherwise the final iterate. History rows carry the train
    loss at the start of each epoch and, when a validation split exists,
    the validation loss after the epoch's updates.
    """

    params: ModelParams
    history: list[dict]
    stopped_epoch: int
    converged: bool
    std_errors: dict | None = None

    @property
    def final_ll(self) -> float:
        return self.history[-1]["ll"] if self.history else float("nan")


class _SgdState:
    def __init__(self, lr, weight_decay):
        self.lr = lr
        self.wd = weight_decay

    def step(self, vec, grad, free):
        if self.wd:
            vec = vec - np.where(free, self.lr * self.wd * vec, 0.0)
        return vec - self.lr * grad


class _AdamState:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, size, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.wd = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, vec, grad, free):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        if self.wd:
            vec = vec - np.where(free, self.lr * self.wd * vec, 0.0)
        return vec - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def fit(data, init: ModelParams, config: EstimationConfig | None = None,
        ls_coefficients=None) -> FitResult:
    """Minimize the penalized negative log-likelihood.

    Full-batch runs are bit-reproducible given the seed; mini-batch runs
    shuffle whole trajectories. Training loss becoming non-finite raises
    DivergenceError carrying the last finite parameters.
    """
    config = config or EstimationConfig()
    data = as_estimation_data(data)
    if init.model_kind is ModelKind.LSRL and ls_coefficients is None:
        raise InputError("the link-size variant needs fixed coefficients for the flow feature")
    evaluator = Evaluator(data, ls_coefficients)
    use_fd = init.model_kind not in ANALYTIC_KINDS
    space = ParameterSpace(init)
    vec = space.flatten(init)
    rng = np.random.default_rng(config.seed)
    if config.optimizer == "adam":
        opt = _AdamState(space.size, config.learning_rate, config.weight_decay)
    else:
        opt = _SgdState(config.learning_rate, config.weight_decay)

    train_lists = [_split_indices(s.trajectories, "train") for s in data]
    if all(len(t) == 0 for t in train_lists):
        train_lists = [_split_indices(s.trajectories, None) for s in data]
    has_val = any("validation" in s.trajectories.splits for s in data)

    def grad_at(params, batches):
        if use_fd:
            report, _ = evaluator.evaluate(params, lam=config.lam, batches=batches)
            grad = _fd_on_batches(evaluator, data, params, config.lam, batches,
                                  ls_coefficients)
        else:
            report, grad = evaluator.evaluate(params, lam=config.lam, need_grad=True,
                                              batches=batches)
        step_grad = grad.to_flat()
        if config.loss_normalization == "trajectories":
            step_grad = step_grad / max(1, sum(len(b) for b in batches))
        return report, step_grad

    history: list[dict] = []
    best_vec = vec.copy()
    best_monitor = math.inf
    best_epoch = 0
    bad_epochs = 0
    stopped = config.max_epochs
    last_finite = (vec.copy(), None)
    for epoch in range(1, config.max_epochs + 1):
        params = space.unflatten(vec)
        if config.batch_size is None:
            try:
                report, step_grad = grad_at(params, train_lists)
            except DivergenceError:
                report = None
            if report is None or not math.isfinite(report.loss):
                raise DivergenceError("training loss diverged",
                                      last_params=space.unflatten(last_finite[0]),
                                      last_loss=last_finite[1])
            last_finite = (vec.copy(), report.loss)
            vec = opt.step(vec, step_grad, space.free)
            epoch_train = report
        else:
            order = [rng.permutation(len(t)) for t in train_lists]
            n_batches = max(
                1, math.ceil(sum(len(t) for t in train_lists) / config.batch_size)
            )
            for b in range(n_batches):
                batches = []
                for t_list, perm in zip(train_lists, order):
                    share = math.ceil(len(t_list) / n_batches)
                    chosen = perm[b * share : (b + 1) * share]
                    batches.append([t_list[i] for i in chosen])
                if sum(len(b_) for b_ in batches) == 0:
                    continue
                params = space.unflatten(vec)
                try:
                    report, step_grad = grad_at(params, batches)
                except DivergenceError:
                    report = None
                if report is None or not math.isfinite(report.loss):
                    raise DivergenceError("training loss diverged",
                                          last_params=space.unflatten(last_finite[0]),
                                          last_loss=last_finite[1])
                last_finite = (vec.copy(), report.loss)
                vec = opt.step(vec, step_grad, space.free)
            epoch_train, _ = evaluator.evaluate(space.unflatten(vec), lam=config.lam,
                                                batches=train_lists)
        row = {
            "epoch": epoch,
            "train_loss": epoch_train.loss,
            "ll": epoch_train.ll,
            "ei": epoch_train.ei,
            "val_loss": None,
        }
        if has_val:
            val_report, _ = evaluator.evaluate(space.unflatten(vec), lam=config.lam,
                                               split="validation")
            row["val_loss"] = val_report.loss
        history.append(row)
        monitor = row["val_loss"] if has_val else row["train_loss"]
        if monitor < best_monitor - 1e-12:
            best_monitor = monitor
            best_vec = vec.copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
        if config.patience is not None and bad_epochs > config.patience:
            stopped = epoch
            logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
        if epoch % 100 == 0:
            logger.info("epoch %d loss %.6f", epoch, row["train_loss"])

    final_vec = best_vec if (config.patience is not None or has_val) else vec
    final_params = space.unflatten(final_vec)
    result = FitResult(final_params, history, stopped, converged=True)
    if config.compute_std_errors:
        try:
            result.std_errors = standard_errors(data, final_params,
                                                ls_coefficients=ls_coefficients)
        except SingularInformationError as exc:
            logger.warning("standard errors unavailable: %s", exc)
            result.std_errors = None
    return result


def standard_errors(data, params: ModelParams, step: float = 1e-5,
                    ls_coefficients=None) -> dict:
    """Standard errors of the free systematic coefficients.

    Observed information is the curvature of -LL with respect to the
    systematic coefficients only, holding every residual weight fixed at
    its estimate; differentiating the analytic gradient by central
    differences gives the Hessian block. Raises
    SingularInformationError when the block is not invertible.
    """
    data = as_estimation_data(data)
    free_names = [n for n in params.phi_names if n not in params.frozen_phi]
    if not free_names:
        raise InputError("no free systematic coefficients")
    space = ParameterSpace(params)
    base = space.flatten(params)
    phi_idx = [params.phi_names.index(n) for n in free_names]

    def ll_grad(vec):
        grad = analytic_gradient(data, space.unflatten(vec), lam=0.0,
                                 ls_coefficients=ls_coefficients)
        return -grad.d_phi[phi_idx]

    k = len(phi_idx)
    hessian = np.zeros((k, k))
    for col, i in enumerate(phi_idx):
        delta = step * max(1.0, abs(base[i]))
        up = base.copy()
        up[i] += delta
        down = base.copy()
        down[i] -= delta
        hessian[:, col] = (ll_grad(down) - ll_grad(up)) / (2 * delta)
    hessian = 0.5 * (hessian + hessian.T)
    eigvals = np.linalg.eigvalsh(hessian)
    # differencing the gradient leaves ~1e-8 of absolute noise, so curvature
    # below that scale is indistinguishable from a flat likelihood
    if eigvals.min() <= 1e-6 * max(1.0, abs(eigvals).max()):
        raise SingularInformationError(
            "observed information is singular or indefinite; "
            "the coefficients are likely not identified on this data"
        )
    cov = np.linalg.inv(hessian)
    diag = np.diag(cov)
    if (diag <= 0).any():
        raise SingularInformationError("information inverse has nonpositive variances")
    return {name: float(np.sqrt(d)) for name, d in zip(free_names, diag)}
