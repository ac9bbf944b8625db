"""Shared forward context: one parameter vector against one network.

ModelContext caches the utility field, per-link scales, link-size
features, value fields, and choice matrices so that repeated queries
(log-likelihoods, metrics, flows) do not redo solves. Contexts are
read-only once built; build a new one for new parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InputError
from .model import (
    LINK_SIZE_FEATURE,
    FeatureTensor,
    ModelKind,
    ModelParams,
    UtilityField,
    nrl_scale,
    systematic_utility,
    utility_field,
)
from .network import LinkGraph, ProximitySet, build_proximities
from .solver import (
    ChoiceMatrix,
    ValueField,
    choice_probabilities,
    expected_link_flow,
    link_size_attribute,
    path_log_probability,
    solve_value,
    solve_value_nrl,
)


class ModelContext:
    """Caches solves for one (graph, features, params) triple.

    For the link-size variant the utility matrix depends on the
    origin-destination pair, so caches are keyed by (destination, origin);
    every other model kind ignores the origin.
    """

    def __init__(
        self,
        graph: LinkGraph,
        features: FeatureTensor,
        params: ModelParams,
        prox: ProximitySet | None = None,
        ls_coefficients: dict | None = None,
    ):
        params.validate_for(graph, features)
        self.graph = graph
        self.features = features
        self.params = params
        if prox is None and params.model_kind is ModelKind.RESDGCNRL:
            prox = build_proximities(graph)
        self.prox = prox
        self.ls_coefficients = dict(ls_coefficients or {})
        if params.model_kind is ModelKind.LSRL and not self.ls_coefficients:
            raise InputError("the link-size variant needs fixed coefficients for the flow feature")
        self._field: UtilityField | None = None
        self._mu_vector = None
        self._ls: dict[tuple[int, int], np.ndarray] = {}
        self._values: dict[tuple[int, int | None], ValueField] = {}
        self._choices: dict[tuple[int, int | None], ChoiceMatrix] = {}

    @property
    def od_specific(self) -> bool:
        return self.params.model_kind is ModelKind.LSRL

    @property
    def field(self) -> UtilityField:
        """Utility field of the base features (link-size term excluded)."""
        if self._field is None:
            base = self.params
            if base.model_kind is ModelKind.LSRL:
                keep = [n for n in base.phi_names if n != LINK_SIZE_FEATURE]
                base = base.replace(
                    model_kind=ModelKind.RL,
                    phi=np.array([base.phi_value(n) for n in keep]),
                    phi_names=tuple(keep),
                    frozen_phi=frozenset(base.frozen_phi) - {LINK_SIZE_FEATURE},
                )
            self._field = utility_field(self.graph, self.features, base, self.prox)
        return self._field

    @property
    def mu(self):
        """Scalar scale, or the per-link scale vector for the nested kind."""
        if self.params.model_kind is ModelKind.NRL:
            if self._mu_vector is None:
                self._mu_vector = nrl_scale(self.features, self.params)
            return self._mu_vector
        return self.params.mu

    def link_size(self, origin: int, destination: int) -> np.ndarray:
        key = (origin, destination)
        if key not in self._ls:
            self._ls[key] = link_size_attribute(
                self.graph, self.features, self.ls_coefficients, origin, destination
            )
        return self._ls[key]

    def utilities(self, destination: int, origin: int | None = None) -> np.ndarray:
        """Deterministic utility matrix, including any per-OD flow feature."""
        h = self.field.h
        if self.od_specific:
            if origin is None:
                raise InputError("the link-size variant needs the origin link")
            ls = self.link_size(origin, destination)
            h = h + self.params.phi_value(LINK_SIZE_FEATURE) * (
                self.graph.adjacency * ls[None, :]
            )
        return h

    def _key(self, destination: int, origin: int | None):
        return (destination, origin if self.od_specific else None)

    def value(self, destination: int, origin: int | None = None) -> ValueField:
        key = self._key(destination, origin)
        if key not in self._values:
            h = self.utilities(destination, origin)
            if self.params.model_kind is ModelKind.NRL:
                self._values[key] = solve_value_nrl(self.graph, h, self.mu, destination)
            else:
                self._values[key] = solve_value(self.graph, h, self.params.mu, destination)
        return self._values[key]

    def choices(self, destination: int, origin: int | None = None) -> ChoiceMatrix:
        key = self._key(destination, origin)
        if key not in self._choices:
            value = self.value(destination, origin)
            h = self.utilities(destination, origin)
            self._choices[key] = choice_probabilities(value, h, self.mu, self.graph)
        return self._choices[key]

    def trajectory_log_probability(self, traj) -> float:
        traj = list(traj)
        if len(traj) < 2:
            return 0.0
        cm = self.choices(traj[-1], traj[0])
        return path_log_probability(traj, cm, self.graph)

    def flow(self, origin: int, destination: int):
        return expected_link_flow(self.choices(destination, origin), origin)
