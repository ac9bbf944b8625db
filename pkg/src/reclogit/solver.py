"""Destination-specific value functions, choice probabilities, and flows.

The value function solves a linear system in z = exp(V / mu): each row
states z_k = sum_a exp(h(a|k)/mu) z_a over feasible transitions, with the
destination row replaced by the boundary condition z_d = 1 (absorbing).
Links that cannot reach the destination are flagged unreachable and carry
V = -inf. The nested variant, whose scale varies by link, is solved by
fixed-point iteration on the logsum instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve
import warnings

from .exceptions import (
    InputError,
    IncompleteRouteError,
    NonConvergenceError,
    StructuralError,
    ValueSolveError,
)
from .model import FeatureTensor, ModelKind, ModelParams, systematic_utility
from .network import LinkGraph, _freeze, reachable_links

_RESIDUAL_HARD_LIMIT = 1e-6


@dataclass(frozen=True, eq=False)
class ValueField:
    """Solved downstream values for one destination.

    V[destination] is exactly 0; unreachable links carry V = -inf and
    z = 0. ``max_residual`` records the worst one-step inconsistency of
    the solved values over reachable links.
    """

    destination: int
    V: np.ndarray
    z: np.ndarray
    reachable: np.ndarray
    mu: float | np.ndarray = 1.0
    max_residual: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "V", _freeze(self.V))
        object.__setattr__(self, "z", _freeze(self.z))
        reach = np.asarray(self.reachable, bool)
        reach.setflags(write=False)
        object.__setattr__(self, "reachable", reach)


@dataclass(frozen=True, eq=False)
class ChoiceMatrix:
    """Row-stochastic next-link probabilities for one destination.

    Rows of unreachable links and of the destination itself are zero;
    every other reachable row sums to one over its feasible successors.
    """

    destination: int
    P: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "P", _freeze(self.P))

    def validate(self, graph: LinkGraph, reachable: np.ndarray, tol: float = 1e-10) -> None:
        off_mask = self.P[graph.adjacency == 0]
        if off_mask.size and np.abs(off_mask).max() > 0:
            raise ValueSolveError("choice probability assigned to an infeasible transition")
        rows = self.P.sum(axis=1)
        active = reachable.copy()
        active[self.destination] = False
        bad = np.abs(rows[active] - 1.0)
        if bad.size and bad.max() > tol:
            raise ValueSolveError(f"choice rows deviate from 1 by {bad.max():.3e}")


@dataclass(frozen=True, eq=False)
class FlowVector:
    """Expected link flows for one origin-destination pair, unit demand."""

    origin: int
    destination: int
    F: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "F", _freeze(self.F))


def transition_weights(graph: LinkGraph, h: np.ndarray, mu, destination: int) -> np.ndarray:
    """exp(h / mu) on the adjacency mask, destination row zeroed."""
    mu_col = np.asarray(mu, float)
    if mu_col.ndim == 1:
        mu_col = mu_col[:, None]
    weights = np.exp(h / mu_col) * graph.adjacency
    weights[destination, :] = 0.0
    return weights


def _solve_boundary_system(weights: np.ndarray, destination: int):
    system = np.eye(weights.shape[0]) - weights
    rhs = np.zeros(weights.shape[0])
    rhs[destination] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", LinAlgWarning)
        try:
            factor = lu_factor(system)
            z = lu_solve(factor, rhs)
        except (np.linalg.LinAlgError, LinAlgWarning, ValueError) as exc:
            cond = float(np.linalg.cond(system)) if system.shape[0] <= 4000 else None
            raise ValueSolveError(
                "value function undefined; the linear system is singular, "
                "likely a positive-utility cycle",
                condition_estimate=cond,
            ) from exc
    return z, factor, system


def solve_value(graph: LinkGraph, h: np.ndarray, mu: float, destination: int) -> ValueField:
    """Solve the value function exactly for a constant scale.

    Raises ValueSolveError when the system is singular or the solved
    values fail the one-step consistency check; links that cannot reach
    the destination come back flagged, not as errors.
    """
    destination = graph.check_index(destination)
    if mu <= 0:
        raise InputError(f"scale mu must be positive, got {mu}")
    weights = transition_weights(graph, h, mu, destination)
    z, _, _ = _solve_boundary_system(weights, destination)
    reach = reachable_links(graph, destination)
    z = np.where(reach, z, 0.0)
    usable = reach & np.isfinite(z) & (z > 0)
    if not usable[destination]:
        raise ValueSolveError("value function undefined at the destination")
    z = np.where(usable, z, 0.0)
    with np.errstate(divide="ignore"):
        V = np.where(usable, mu * np.log(np.where(usable, z, 1.0)), -np.inf)
    residual = value_residual(graph, h, mu, destination, V, usable)
    if residual > _RESIDUAL_HARD_LIMIT:
        system = np.eye(graph.link_count) - weights
        raise ValueSolveError(
            f"value solve inconsistent (residual {residual:.3e})",
            condition_estimate=float(np.linalg.cond(system)),
        )
    return ValueField(destination, V, z, usable, mu, residual)


def value_residual(
    graph: LinkGraph,
    h: np.ndarray,
    mu,
    destination: int,
    V: np.ndarray,
    reachable: np.ndarray,
) -> float:
    """Worst |V(k) - logsum over successors| across reachable links."""
    mu_vec = np.broadcast_to(np.asarray(mu, float), (graph.link_count,))
    applied = _bellman_apply(graph, h, mu_vec, destination, V)
    check = reachable.copy()
    diff = np.abs(applied[check] - V[check])
    return float(diff.max()) if diff.size else 0.0


def _bellman_apply(graph, h, mu_vec, destination, V):
    """One logsum update: V_k <- mu_k * LSE_a((h_ka + V_a) / mu_k)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(graph.adjacency > 0, (h + V[None, :]) / mu_vec[:, None], -np.inf)
        row_max = scores.max(axis=1)
        finite = np.isfinite(row_max)
        out = np.full(graph.link_count, -np.inf)
        if finite.any():
            shifted = np.exp(scores[finite] - row_max[finite][:, None])
            out[finite] = mu_vec[finite] * (
                np.log(shifted.sum(axis=1)) + row_max[finite]
            )
    out[destination] = 0.0
    return out


def solve_value_nrl(
    graph: LinkGraph,
    h: np.ndarray,
    mu_vec: np.ndarray,
    destination: int,
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> ValueField:
    """Fixed-point iteration for per-link scales, started from V = 0.

    Converges when the largest change over reachable links drops below
    ``tol``; raises NonConvergenceError with the last residual otherwise.
    """
    destination = graph.check_index(destination)
    mu_vec = np.asarray(mu_vec, float)
    if mu_vec.shape != (graph.link_count,):
        raise InputError(f"mu_vec has shape {mu_vec.shape}, expected ({graph.link_count},)")
    if (mu_vec <= 0).any():
        raise InputError("per-link scales must be strictly positive")
    reach = reachable_links(graph, destination)
    V = np.where(reach, 0.0, -np.inf)
    V[destination] = 0.0
    for _ in range(max_iter):
        V_next = _bellman_apply(graph, h, mu_vec, destination, V)
        V_next = np.where(reach, V_next, -np.inf)
        V_next[destination] = 0.0
        delta = np.abs(V_next[reach] - V[reach])
        V = V_next
        if delta.size == 0 or delta.max() < tol:
            break
    else:
        raise NonConvergenceError(
            f"value iteration did not converge in {max_iter} iterations",
            residual=float(delta.max()),
        )
    usable = reach & np.isfinite(V)
    z = np.where(usable, np.exp(np.where(usable, V, 0.0) / mu_vec), 0.0)
    residual = value_residual(graph, h, mu_vec, destination, V, usable)
    return ValueField(destination, V, z, usable, mu_vec, residual)


def choice_probabilities(
    value: ValueField, h: np.ndarray, mu, graph: LinkGraph
) -> ChoiceMatrix:
    """Next-link probabilities exp((h + V(a) - V(k)) / mu_k) on the mask."""
    mu_arr = np.asarray(mu, float)
    n = graph.link_count
    if mu_arr.ndim == 0:
        weights = transition_weights(graph, h, float(mu_arr), value.destination)
        z_safe = np.where(value.z > 0, value.z, 1.0)
        P = weights * value.z[None, :] / z_safe[:, None]
        P[~value.reachable, :] = 0.0
    else:
        V = value.V
        with np.errstate(invalid="ignore"):
            logits = np.where(
                graph.adjacency > 0, (h + V[None, :] - V[:, None]) / mu_arr[:, None], -np.inf
            )
        logits[~value.reachable, :] = -np.inf
        logits[:, ~value.reachable] = -np.inf
        logits[value.destination, :] = -np.inf
        P = np.exp(logits)
        P[~np.isfinite(P)] = 0.0
    P[value.destination, :] = 0.0
    return ChoiceMatrix(value.destination, P)


def path_log_probability(traj: Sequence[int], choices, graph: LinkGraph | None = None) -> float:
    """Sum of step log-probabilities along a link sequence.

    ``choices`` is a ChoiceMatrix for the trajectory's destination, or a
    callable/provider mapping (destination, origin) to one. When a graph
    is supplied, a structurally infeasible step raises StructuralError;
    a feasible step with zero probability (an unreachable continuation)
    yields -inf either way.
    """
    traj = list(traj)
    if len(traj) < 2:
        return 0.0
    if graph is not None:
        check_steps(graph, traj)
    cm = choices
    if not isinstance(cm, ChoiceMatrix):
        cm = choices(traj[-1], traj[0])
    if cm.destination != traj[-1]:
        raise InputError(
            f"choice matrix is for destination {cm.destination}, trajectory ends at {traj[-1]}"
        )
    total = 0.0
    for k, a in zip(traj[:-1], traj[1:]):
        p = cm.P[k, a]
        if p <= 0.0:
            return -np.inf
        total += np.log(p)
    return float(total)


def check_steps(graph: LinkGraph, traj: Sequence[int], label="trajectory") -> None:
    """Raise StructuralError on the first non-adjacent step."""
    for step, (k, a) in enumerate(zip(traj[:-1], traj[1:])):
        if graph.adjacency[k, a] == 0:
            raise StructuralError(
                f"{label}: step {step} ({k} -> {a}) is not a feasible transition"
            )


def expected_link_flow(cm: ChoiceMatrix, origin: int) -> FlowVector:
    """Expected visits per link under unit demand from one origin.

    Solves (I - P^T) F = e_origin; the absorbing destination collects a
    total inflow of one.
    """
    n = cm.P.shape[0]
    if not 0 <= origin < n:
        raise InputError(f"origin index {origin} out of range")
    if cm.P[origin].sum() == 0 and origin != cm.destination:
        raise ValueSolveError("origin cannot reach the destination")
    system = np.eye(n) - cm.P.T
    rhs = np.zeros(n)
    rhs[origin] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", LinAlgWarning)
        try:
            F = np.linalg.solve(system, rhs)
        except (np.linalg.LinAlgError, LinAlgWarning) as exc:
            raise ValueSolveError("flow system is singular") from exc
    if (F < -1e-9).any():
        raise ValueSolveError("flow solve produced negative flows")
    F = np.maximum(F, 0.0)
    return FlowVector(origin, cm.destination, F)


def link_size_attribute(
    graph: LinkGraph,
    features: FeatureTensor,
    fixed_phi: dict,
    origin: int,
    destination: int,
    mu: float = 1.0,
) -> np.ndarray:
    """OD-specific expected link flow under fixed plain-logit coefficients.

    The result is used as an extra arrival-link feature that corrects for
    route overlap; it must be recomputed for every origin-destination
    pair.
    """
    names = tuple(fixed_phi)
    params = ModelParams(ModelKind.RL, np.array([fixed_phi[n] for n in names]), names, mu=mu)
    v = systematic_utility(features, params)
    value = solve_value(graph, v, mu, destination)
    cm = choice_probabilities(value, v, mu, graph)
    return expected_link_flow(cm, origin).F


def most_probable_route(
    cm: ChoiceMatrix, origin: int, destination: int, max_steps: int | None = None
) -> list[int]:
    """Greedy highest-probability walk from origin to destination.

    Ties break toward the lowest link index. Raises IncompleteRouteError,
    carrying the partial path, if the walk dead-ends or exceeds
    ``max_steps`` (default 2 * link count).
    """
    n = cm.P.shape[0]
    if max_steps is None:
        max_steps = 2 * n
    route = [int(origin)]
    current = int(origin)
    for _ in range(max_steps):
        if current == destination:
            return route
        row = cm.P[current]
        if row.sum() <= 0:
            raise IncompleteRouteError(
                f"dead end at link {current} before reaching {destination}", route
            )
        current = int(np.argmax(row))
        route.append(current)
    if current == destination:
        return route
    raise IncompleteRouteError(
        f"step cap {max_steps} reached before destination {destination}", route
    )
