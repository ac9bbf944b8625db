"""Directed road networks at the link level.

Links are the vertices of every downstream computation: ``adjacency[k, a]``
is 1 exactly when link ``a`` leaves the head node of link ``k``. Removed
links keep their index with a zeroed adjacency row and column so that
parameter matrices stay comparable across counterfactual networks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .exceptions import DimensionError, InputError, ParseError

NETWORK_HEADER = ("link_id", "tail_node", "head_node")


@dataclass(frozen=True)
class Link:
    """One directed link, identified by id, running tail -> head."""

    link_id: str
    tail: str
    head: str


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LinkGraph:
    """Immutable link-level network with dense link-to-link adjacency.

    Attributes
    ----------
    links : tuple of Link
        Dense index space 0..link_count-1; removed links stay in place.
    adjacency : ndarray of shape (link_count, link_count)
        Binary matrix; entry (k, a) is 1 iff head(k) == tail(a) and
        neither link has been removed.
    link_features : mapping of feature name to per-link value array
        Raw columns read from the network file (or supplied directly).
    removed : frozenset of int
        Indices whose transitions have been disabled.
    """

    links: tuple[Link, ...]
    adjacency: np.ndarray
    link_features: Mapping[str, np.ndarray]
    removed: frozenset = frozenset()
    _index: dict = field(repr=False, default=None)

    def __post_init__(self):
        n = len(self.links)
        adj = np.asarray(self.adjacency, dtype=float)
        if adj.shape != (n, n):
            raise DimensionError(f"adjacency has shape {adj.shape}, expected ({n}, {n})")
        object.__setattr__(self, "adjacency", _freeze(adj))
        feats = {k: _freeze(np.asarray(v, dtype=float)) for k, v in self.link_features.items()}
        for name, col in feats.items():
            if col.shape != (n,):
                raise InputError(f"feature column {name!r} has length {col.shape}, expected {n}")
        object.__setattr__(self, "link_features", feats)
        object.__setattr__(self, "_index", {ln.link_id: i for i, ln in enumerate(self.links)})

    @property
    def link_count(self) -> int:
        return len(self.links)

    @property
    def node_count(self) -> int:
        nodes = {ln.tail for ln in self.links} | {ln.head for ln in self.links}
        return len(nodes)

    def index_of(self, link_id: str) -> int:
        try:
            return self._index[str(link_id)]
        except KeyError:
            raise InputError(f"unknown link id {link_id!r}") from None

    def out_links(self, k: int) -> np.ndarray:
        """Indices of links reachable in one transition from link k."""
        return np.flatnonzero(self.adjacency[k])

    def in_links(self, a: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[:, a])

    def check_index(self, idx: int) -> int:
        idx = int(idx)
        if not 0 <= idx < self.link_count:
            raise InputError(f"link index {idx} out of range [0, {self.link_count})")
        return idx


def _adjacency_from_links(links) -> np.ndarray:
    n = len(links)
    adj = np.zeros((n, n))
    by_tail: dict[str, list[int]] = {}
    for i, ln in enumerate(links):
        by_tail.setdefault(ln.tail, []).append(i)
    for k, ln in enumerate(links):
        for a in by_tail.get(ln.head, ()):
            if a != k:
                adj[k, a] = 1.0
    return adj


def make_graph(links, link_features=None, reject_loops=True) -> LinkGraph:
    """Build a LinkGraph from Link records, constructing the adjacency."""
    links = tuple(links)
    seen = set()
    for ln in links:
        if ln.link_id in seen:
            raise InputError(f"duplicate link id {ln.link_id!r}")
        seen.add(ln.link_id)
        if reject_loops and ln.tail == ln.head:
            raise InputError(f"loop link {ln.link_id!r} ({ln.tail}->{ln.head}) rejected")
    return LinkGraph(links, _adjacency_from_links(links), dict(link_features or {}))


def load_network(path, reject_loops=True) -> LinkGraph:
    """Load a network from CSV with header link_id,tail_node,head_node,...

    Any extra columns are parsed as per-link numeric feature columns.
    Raises ParseError (with line numbers) for malformed rows, duplicate
    link ids, or missing node references.
    """
    links: list[Link] = []
    feature_names: list[str] = []
    columns: dict[str, list[float]] = {}
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty network file", path) from None
        header = [h.strip() for h in header]
        if tuple(header[:3]) != NETWORK_HEADER:
            raise ParseError(
                f"expected header to start with {','.join(NETWORK_HEADER)}, got {','.join(header[:3])}",
                path,
                1,
            )
        feature_names = header[3:]
        columns = {name: [] for name in feature_names}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, lineno)
            link_id, tail, head = (c.strip() for c in row[:3])
            if not link_id:
                raise ParseError("missing link id", path, lineno)
            if link_id in seen:
                raise ParseError(f"duplicate link id {link_id!r}", path, lineno)
            if not tail or not head:
                raise ParseError(f"link {link_id!r} references an undefined node", path, lineno)
            seen.add(link_id)
            if reject_loops and tail == head:
                raise ParseError(f"loop link {link_id!r} ({tail}->{head}) rejected", path, lineno)
            links.append(Link(link_id, tail, head))
            for name, cell in zip(feature_names, row[3:]):
                try:
                    columns[name].append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"non-numeric value {cell!r} in feature column {name!r}", path, lineno
                    ) from None
    if not links:
        raise ParseError("network file contains no links", path)
    graph = LinkGraph(tuple(links), _adjacency_from_links(links), {n: np.array(v) for n, v in columns.items()})
    return graph


def save_network(path, graph: LinkGraph) -> None:
    """Write a LinkGraph back to the CSV network format."""
    names = list(graph.link_features)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(NETWORK_HEADER) + names)
        for i, ln in enumerate(graph.links):
            row = [ln.link_id, ln.tail, ln.head]
            row += [repr(float(graph.link_features[n][i])) for n in names]
            writer.writerow(row)


def remove_link(graph: LinkGraph, link: int) -> LinkGraph:
    """Disable a link, zeroing its adjacency row and column.

    The link keeps its index so every matrix stays dimension-stable across
    counterfactuals. Removing an already-removed link is a no-op.
    """
    link = graph.check_index(link)
    adj = np.array(graph.adjacency)
    adj[link, :] = 0.0
    adj[:, link] = 0.0
    return LinkGraph(graph.links, adj, dict(graph.link_features), graph.removed | {link})


@dataclass(frozen=True, eq=False)
class ProximitySet:
    """Degree-normalized link-proximity matrices.

    ``z_first`` symmetrizes direct adjacency; ``z_second_in`` weights pairs
    of links by shared successors, ``z_second_out`` by shared predecessors.
    Each raw proximity gets a unit self-loop before the symmetric
    normalization D^{-1/2} (A + I) D^{-1/2}, so rows with no neighbors
    normalize to a pure self-loop.
    """

    z_first: np.ndarray
    z_second_in: np.ndarray
    z_second_out: np.ndarray

    def __post_init__(self):
        for name in ("z_first", "z_second_in", "z_second_out"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))

    def combined(self, alpha: float, beta: float, gamma: float) -> np.ndarray:
        """Weighted sum used as the propagation operator of the graph layers."""
        return alpha * self.z_first + beta * self.z_second_in + gamma * self.z_second_out


def _normalize_with_self_loops(raw: np.ndarray) -> np.ndarray:
    padded = raw + np.eye(raw.shape[0])
    degree = padded.sum(axis=1)
    scale = 1.0 / np.sqrt(degree)
    return padded * scale[:, None] * scale[None, :]


def build_proximities(graph: LinkGraph) -> ProximitySet:
    """Construct the three normalized proximity matrices of a link graph."""
    adj = graph.adjacency
    first = ((adj + adj.T) > 0).astype(float)

    in_degree = adj.sum(axis=0)
    inv_in = np.divide(1.0, in_degree, out=np.zeros_like(in_degree), where=in_degree > 0)
    second_in = (adj * inv_in[None, :]) @ adj.T

    out_degree = adj.sum(axis=1)
    inv_out = np.divide(1.0, out_degree, out=np.zeros_like(out_degree), where=out_degree > 0)
    second_out = adj.T @ (adj * inv_out[:, None])

    return ProximitySet(
        _normalize_with_self_loops(first),
        _normalize_with_self_loops(second_in),
        _normalize_with_self_loops(second_out),
    )


def reachable_links(graph: LinkGraph, destination: int) -> np.ndarray:
    """Boolean vector: which links can reach the destination link.

    The destination itself counts as reachable; traversal follows the
    adjacency forward, so removed links are never reachable (their rows
    and columns are zero).
    """
    destination = graph.check_index(destination)
    n = graph.link_count
    reach = np.zeros(n, dtype=bool)
    reach[destination] = True
    adj = graph.adjacency > 0
    while True:
        frontier = adj @ reach
        updated = reach | frontier
        if (updated == reach).all():
            return reach
        reach = updated
