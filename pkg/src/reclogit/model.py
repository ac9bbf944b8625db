"""Deterministic utilities: systematic components and residual layers.

The systematic component is linear in per-action features. The hybrid
models add a residual component built from masked softplus-style layers;
the graph-convolutional variant propagates layer inputs through weighted
link-proximity matrices before the layer nonlinearity. With all residual
weight matrices at zero, every model reduces exactly to plain recursive
logit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import DimensionError, InputError, LayerOverflowError
from .network import LinkGraph, ProximitySet, _freeze

LN2 = math.log(2.0)

LINK_SIZE_FEATURE = "link_size"


class ModelKind(str, enum.Enum):
    RL = "rl"
    LSRL = "lsrl"
    NRL = "nrl"
    RESRL = "resrl"
    RESDGCNRL = "resdgcnrl"

    @classmethod
    def coerce(cls, value) -> "ModelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise InputError(f"unknown model kind {value!r}; expected one of {choices}") from None


HYBRID_KINDS = (ModelKind.RESRL, ModelKind.RESDGCNRL)


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    """Per-action feature values as adjacency-masked matrices.

    ``matrices[q, k, a]`` is the value of feature q when moving from link
    k to link a; entries off the adjacency mask are zero. ``link_values``
    keeps the raw per-link columns for features that are attributes of the
    arrival link (used by the per-link scale of the nested variant).
    """

    names: tuple[str, ...]
    matrices: np.ndarray
    link_values: Mapping[str, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        mats = np.asarray(self.matrices, dtype=float)
        if mats.ndim != 3 or mats.shape[0] != len(self.names):
            raise DimensionError(
                f"feature tensor has shape {mats.shape}, expected ({len(self.names)}, V, V)"
            )
        object.__setattr__(self, "matrices", _freeze(mats))
        object.__setattr__(
            self, "link_values", {k: _freeze(np.asarray(v, float)) for k, v in self.link_values.items()}
        )
        if "travel_time" in self.link_values and (self.link_values["travel_time"] < 0).any():
            raise InputError("travel_time must be nonnegative")

    @property
    def link_count(self) -> int:
        return self.matrices.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise InputError(f"feature {name!r} not present; have {self.names}") from None

    def matrix(self, name: str) -> np.ndarray:
        return self.matrices[self.index(name)]

    def with_feature(self, name: str, matrix: np.ndarray, link_values=None) -> "FeatureTensor":
        """Return a copy with one extra feature matrix appended."""
        if name in self.names:
            raise InputError(f"feature {name!r} already present")
        mats = np.concatenate([self.matrices, np.asarray(matrix, float)[None]], axis=0)
        values = dict(self.link_values)
        if link_values is not None:
            values[name] = np.asarray(link_values, float)
        return FeatureTensor(self.names + (name,), mats, values)


def build_features(
    graph: LinkGraph,
    names: Sequence[str] | None = None,
    transition_features: Mapping[str, np.ndarray] | None = None,
) -> FeatureTensor:
    """Assemble the masked feature tensor for a graph.

    Per-link columns from the graph are broadcast over predecessors, so
    x(a|k) = column[a] wherever the transition k -> a exists. Transition
    features (turn dummies and the like) can be supplied directly as
    full matrices.
    """
    transition_features = dict(transition_features or {})
    if names is None:
        names = list(graph.link_features) + [n for n in transition_features if n not in graph.link_features]
    mask = graph.adjacency
    mats = []
    link_values = {}
    for name in names:
        if name in transition_features:
            mat = np.asarray(transition_features[name], float)
            if mat.shape != mask.shape:
                raise DimensionError(f"transition feature {name!r} has shape {mat.shape}")
            mats.append(mat * mask)
        elif name in graph.link_features:
            col = graph.link_features[name]
            link_values[name] = col
            mats.append(mask * col[None, :])
        else:
            raise InputError(f"feature column {name!r} not found in network file or extras")
    stack = np.stack(mats) if mats else np.zeros((0, graph.link_count, graph.link_count))
    return FeatureTensor(tuple(names), stack, link_values)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full parameter set for any model in the family.

    phi holds the systematic coefficients in the order of ``phi_names``.
    theta holds one dense weight matrix per residual layer. The scalar
    triple (alpha, beta, gamma) weights the three proximity matrices in
    the graph-convolutional variant. ``nrl_gamma`` are the coefficients
    of the per-link log-scale for the nested variant. Names listed in
    ``frozen_phi`` are held fixed during estimation and carry exactly
    zero gradient.
    """

    model_kind: ModelKind
    phi: np.ndarray
    phi_names: tuple[str, ...]
    mu: float = 1.0
    theta: tuple[np.ndarray, ...] = ()
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    nrl_gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nrl_gamma_names: tuple[str, ...] = ()
    frozen_phi: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "model_kind", ModelKind.coerce(self.model_kind))
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        object.__setattr__(self, "phi", _freeze(phi))
        object.__setattr__(self, "phi_names", tuple(self.phi_names))
        if len(self.phi_names) != phi.shape[0]:
            raise DimensionError(
                f"{phi.shape[0]} coefficients for {len(self.phi_names)} names {self.phi_names}"
            )
        if self.mu <= 0:
            raise InputError(f"scale mu must be positive, got {self.mu}")
        theta = tuple(_freeze(np.asarray(t, float)) for t in self.theta)
        object.__setattr__(self, "theta", theta)
        for m, t in enumerate(theta, start=1):
            if t.ndim != 2 or t.shape[0] != t.shape[1]:
                raise DimensionError(f"theta layer {m} has shape {t.shape}, expected square")
        object.__setattr__(self, "nrl_gamma", _freeze(np.atleast_1d(np.asarray(self.nrl_gamma, float))))
        object.__setattr__(self, "nrl_gamma_names", tuple(self.nrl_gamma_names))
        if len(self.nrl_gamma_names) != self.nrl_gamma.shape[0]:
            raise DimensionError("nrl_gamma and nrl_gamma_names disagree")
        object.__setattr__(self, "frozen_phi", frozenset(self.frozen_phi))
        unknown = self.frozen_phi - set(self.phi_names)
        if unknown:
            raise InputError(f"frozen coefficients {sorted(unknown)} not among {self.phi_names}")

    @property
    def n_layers(self) -> int:
        return len(self.theta)

    def phi_value(self, name: str) -> float:
        return float(self.phi[self.phi_names.index(name)])

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def validate_for(self, graph: LinkGraph, features: FeatureTensor) -> None:
        n = graph.link_count
        if features.link_count != n:
            raise DimensionError(
                f"feature tensor is for {features.link_count} links, graph has {n}"
            )
        for m, t in enumerate(self.theta, start=1):
            if t.shape != (n, n):
                raise DimensionError(f"theta layer {m} has shape {t.shape}, graph has {n} links")
        for name in self.phi_names:
            if name == LINK_SIZE_FEATURE and self.model_kind is ModelKind.LSRL:
                continue
            if name not in features.names:
                raise InputError(f"coefficient refers to missing feature column {name!r}")
        if self.model_kind in HYBRID_KINDS and not self.theta:
            raise InputError(f"{self.model_kind.value} requires at least one theta layer")
        for name in self.nrl_gamma_names:
            if name != LINK_SIZE_FEATURE and name not in features.link_values:
                raise InputError(f"scale feature {name!r} is not a per-link feature column")


@dataclass(frozen=True, eq=False)
class UtilityField:
    """Forward-pass result: systematic, residual, and total utilities.

    ``hidden`` keeps every intermediate layer output (h^0 .. h^M) and
    ``preactivations`` the per-layer matrix products, both needed by the
    backward recursion of the gradient.
    """

    v: np.ndarray
    g: np.ndarray
    h: np.ndarray
    hidden: tuple[np.ndarray, ...]
    preactivations: tuple[np.ndarray, ...] = ()

    @property
    def n_layers(self) -> int:
        return len(self.hidden) - 1


def systematic_utility(features: FeatureTensor, params: ModelParams) -> np.ndarray:
    """Linear-in-features systematic utility matrix, zero off the mask."""
    if len(params.phi_names) != len(params.phi):
        raise DimensionError("phi/phi_names mismatch")
    v = np.zeros((features.link_count, features.link_count))
    for name, coef in zip(params.phi_names, params.phi):
        v += coef * features.matrix(name)
    return v


def layer_term(preactivation: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked residual-layer increment ln 2 - softplus(x).

    Always below ln 2; equals zero wherever the preactivation is zero, so
    zero weight matrices leave the utilities untouched.
    """
    return (LN2 - np.logaddexp(0.0, preactivation)) * mask


def _check_layer(mat: np.ndarray, layer: int) -> None:
    if not np.isfinite(mat).all():
        raise LayerOverflowError(layer)


def resrl_residual(v: np.ndarray, params: ModelParams, graph: LinkGraph) -> UtilityField:
    """Residual forward pass where each layer sees raw utilities.

    Layer m maps h to h + (ln 2 - softplus(h theta_m)) masked by the
    adjacency; cross-effects are confined to actions leaving a common
    link.
    """
    mask = graph.adjacency
    h = v
    hidden = [v]
    preacts = []
    for m, theta in enumerate(params.theta, start=1):
        x = h @ theta
        h = h + layer_term(x, mask)
        _check_layer(h, m)
        hidden.append(h)
        preacts.append(x)
    return UtilityField(v, h - v, h, tuple(hidden), tuple(preacts))


def resdgcn_residual(
    v: np.ndarray, params: ModelParams, prox: ProximitySet, graph: LinkGraph
) -> UtilityField:
    """Residual forward pass with proximity propagation.

    Identical to the plain residual stack except each layer input is
    premultiplied by the weighted proximity operator, which lets actions
    elsewhere in the network exert cross-effects.
    """
    mask = graph.adjacency
    operator = prox.combined(params.alpha, params.beta, params.gamma)
    h = v
    hidden = [v]
    preacts = []
    for m, theta in enumerate(params.theta, start=1):
        x = operator @ h @ theta
        h = h + layer_term(x, mask)
        _check_layer(h, m)
        hidden.append(h)
        preacts.append(x)
    return UtilityField(v, h - v, h, tuple(hidden), tuple(preacts))


def utility_field(
    graph: LinkGraph,
    features: FeatureTensor,
    params: ModelParams,
    prox: ProximitySet | None = None,
) -> UtilityField:
    """Dispatch the forward pass for the configured model kind."""
    v = systematic_utility(features, params)
    kind = params.model_kind
    if kind is ModelKind.RESRL:
        return resrl_residual(v, params, graph)
    if kind is ModelKind.RESDGCNRL:
        if prox is None:
            raise InputError("the graph-convolutional model needs a ProximitySet")
        return resdgcn_residual(v, params, prox, graph)
    zero = np.zeros_like(v)
    return UtilityField(v, zero, v, (v,), ())


def nrl_scale(features: FeatureTensor, params: ModelParams) -> np.ndarray:
    """Per-link scale vector exp(sum_j gamma_j * feature_j), strictly positive."""
    if params.model_kind is not ModelKind.NRL:
        raise InputError("per-link scales only apply to the nested model kind")
    n = features.link_count
    exponent = np.zeros(n)
    for name, coef in zip(params.nrl_gamma_names, params.nrl_gamma):
        if name not in features.link_values:
            raise InputError(f"scale feature {name!r} is not a per-link feature column")
        exponent += coef * features.link_values[name]
    if not np.isfinite(exponent).all():
        raise LayerOverflowError(0, "scale exponent is non-finite")
    return np.exp(exponent)


def cross_effect_derivative(
    field: UtilityField,
    params: ModelParams,
    prox: ProximitySet | None,
    k: int,
    a: int,
    k_from: int,
    a_from: int,
) -> float:
    """Closed-form d u(a|k) / d v(a_from|k_from) for one-layer models.

    Treats the systematic matrix as a free input; covers the direct term
    when (k, a) == (k_from, a_from). The sign of the residual part is
    opposite to theta[a_from, a] because the layer slope is -sigmoid of
    the preactivation.
    """
    kind = params.model_kind
    direct = 1.0 if (k == k_from and a == a_from) else 0.0
    if kind in (ModelKind.RL, ModelKind.LSRL, ModelKind.NRL):
        return direct
    if params.n_layers != 1:
        raise InputError(
            "closed-form cross-effects cover one layer only; use the finite-difference gradient"
        )
    x = field.preactivations[0]
    slope = -float(expit(x[k, a]))
    theta = params.theta[0]
    if kind is ModelKind.RESRL:
        weight = 1.0 if k == k_from else 0.0
    else:
        if prox is None:
            raise InputError("the graph-convolutional model needs a ProximitySet")
        weight = float(prox.combined(params.alpha, params.beta, params.gamma)[k, k_from])
    return direct + slope * weight * float(theta[a_from, a])
