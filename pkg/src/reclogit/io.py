"""Ingestion and persistence: trajectories, parameters, the toy fixture.

Networks and trajectories travel as UTF-8 CSV; parameters, configs, and
reports as JSON. Python's JSON float encoding uses shortest round-trip
representations, so parameter files reload bit-exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, InputError, ParseError, StructuralError
from .model import FeatureTensor, ModelKind, ModelParams, build_features
from .network import Link, LinkGraph, make_graph, remove_link

VALID_SPLITS = ("train", "validation", "test")


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    """Observed link sequences with train/validation/test labels."""

    ids: tuple[str, ...]
    paths: tuple[tuple[int, ...], ...]
    splits: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "paths", tuple(tuple(int(x) for x in p) for p in self.paths))
        splits = tuple(self.splits) if self.splits else tuple("train" for _ in self.ids)
        object.__setattr__(self, "splits", splits)
        if not (len(self.ids) == len(self.paths) == len(self.splits)):
            raise InputError("ids, paths, and splits must have equal length")
        bad = set(self.splits) - set(VALID_SPLITS)
        if bad:
            raise InputError(f"unknown split labels {sorted(bad)}; expected {VALID_SPLITS}")
        for tid, path in zip(self.ids, self.paths):
            if len(path) == 0:
                raise InputError(f"trajectory {tid!r} is empty")

    def __len__(self) -> int:
        return len(self.paths)

    def subset(self, split: str) -> "TrajectorySet":
        keep = [i for i, s in enumerate(self.splits) if s == split]
        return TrajectorySet(
            tuple(self.ids[i] for i in keep),
            tuple(self.paths[i] for i in keep),
            tuple(self.splits[i] for i in keep),
        )

    def with_splits(self, splits) -> "TrajectorySet":
        return TrajectorySet(self.ids, self.paths, tuple(splits))

    def random_split(self, fractions=(0.7, 0.2, 0.1), seed: int = 42) -> "TrajectorySet":
        """Assign splits at random in the given train/validation/test shares."""
        if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
            raise InputError("fractions must be three shares summing to 1")
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        n_train = int(round(fractions[0] * len(self)))
        n_val = int(round(fractions[1] * len(self)))
        labels = [""] * len(self)
        for pos, idx in enumerate(order):
            if pos < n_train:
                labels[idx] = "train"
            elif pos < n_train + n_val:
                labels[idx] = "validation"
            else:
                labels[idx] = "test"
        return self.with_splits(labels)

    def validate(self, graph: LinkGraph) -> None:
        """Check every step is a feasible transition on the graph."""
        n = graph.link_count
        for tid, path in zip(self.ids, self.paths):
            for link in path:
                if not 0 <= link < n:
                    raise InputError(f"trajectory {tid!r} references link index {link} out of range")
            for step, (k, a) in enumerate(zip(path[:-1], path[1:])):
                if graph.adjacency[k, a] == 0:
                    raise StructuralError(
                        f"trajectory {tid!r}: step {step} ({graph.links[k].link_id} -> "
                        f"{graph.links[a].link_id}) is not a feasible transition"
                    )


def _finish_trajectories(rows, graph, path):
    ids, paths, splits = [], [], []
    for tid, link_ids, split, line in rows:
        idx = []
        for lid in link_ids:
            try:
                idx.append(graph.index_of(lid))
            except InputError:
                raise ParseError(f"unknown link id {lid!r}", path, line) from None
        ids.append(tid)
        paths.append(tuple(idx))
        splits.append(split or "train")
    ts = TrajectorySet(tuple(ids), tuple(paths), tuple(splits))
    ts.validate(graph)
    return ts


def load_trajectories(path, graph: LinkGraph) -> TrajectorySet:
    """Load trajectories from CSV in either supported layout.

    Long layout: header ``traj_id,seq,link_id[,split]``, one row per step,
    ordered by the integer ``seq`` within each trajectory. Compact layout:
    ``traj_id,link_id;link_id;...[,split]`` with one row per trajectory
    (the header line ``traj_id,links[,split]`` is optional). Rows are
    validated against the graph; the first infeasible row fails with its
    line number.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        lines = [(i, row) for i, row in enumerate(reader, start=1)
                 if row and any(c.strip() for c in row)]
    if not lines:
        raise ParseError("empty trajectory file", path)
    first = [c.strip() for c in lines[0][1]]
    if first[:3] == ["traj_id", "seq", "link_id"]:
        has_split = len(first) > 3 and first[3] == "split"
        per_traj: dict[str, list] = {}
        order: list[str] = []
        split_of: dict[str, str] = {}
        line_of: dict[str, int] = {}
        for lineno, row in lines[1:]:
            if len(row) < 3:
                raise ParseError("expected traj_id,seq,link_id", path, lineno)
            tid, seq, lid = row[0].strip(), row[1].strip(), row[2].strip()
            try:
                seq = int(seq)
            except ValueError:
                raise ParseError(f"non-integer seq {seq!r}", path, lineno) from None
            if tid not in per_traj:
                per_traj[tid] = []
                order.append(tid)
                line_of[tid] = lineno
            per_traj[tid].append((seq, lid))
            if has_split and len(row) > 3 and row[3].strip():
                split_of[tid] = row[3].strip()
        rows = []
        for tid in order:
            steps = sorted(per_traj[tid])
            rows.append((tid, [lid for _, lid in steps], split_of.get(tid), line_of[tid]))
        return _finish_trajectories(rows, graph, path)
    start = 1 if first[0] == "traj_id" else 0
    rows = []
    for lineno, row in lines[start:]:
        if len(row) < 2:
            raise ParseError("expected traj_id,link_id;link_id;...", path, lineno)
        tid = row[0].strip()
        link_ids = [tok.strip() for tok in row[1].split(";") if tok.strip()]
        if not link_ids:
            raise ParseError(f"trajectory {tid!r} has no links", path, lineno)
        split = row[2].strip() if len(row) > 2 and row[2].strip() else None
        rows.append((tid, link_ids, split, lineno))
    return _finish_trajectories(rows, graph, path)


def save_trajectories(path, trajs: TrajectorySet, graph: LinkGraph) -> None:
    """Write the compact one-row-per-trajectory layout."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["traj_id", "links", "split"])
        for tid, p, split in zip(trajs.ids, trajs.paths, trajs.splits):
            writer.writerow([tid, ";".join(graph.links[i].link_id for i in p), split])


def params_to_dict(params: ModelParams) -> dict:
    return {
        "model_kind": params.model_kind.value,
        "phi": {n: float(v) for n, v in zip(params.phi_names, params.phi)},
        "phi_order": list(params.phi_names),
        "mu": float(params.mu),
        "M": params.n_layers,
        "theta": [t.tolist() for t in params.theta],
        "alpha": float(params.alpha),
        "beta": float(params.beta),
        "gamma": float(params.gamma),
        "nrl_gamma": {n: float(v) for n, v in zip(params.nrl_gamma_names, params.nrl_gamma)},
        "nrl_gamma_order": list(params.nrl_gamma_names),
        "frozen": sorted(params.frozen_phi),
        "link_count": params.theta[0].shape[0] if params.theta else None,
    }


def params_from_dict(doc: dict) -> ModelParams:
    try:
        phi_order = doc.get("phi_order") or sorted(doc["phi"])
        nrl_order = doc.get("nrl_gamma_order") or sorted(doc.get("nrl_gamma", {}))
        return ModelParams(
            model_kind=ModelKind.coerce(doc["model_kind"]),
            phi=np.array([doc["phi"][n] for n in phi_order], dtype=float),
            phi_names=tuple(phi_order),
            mu=float(doc.get("mu", 1.0)),
            theta=tuple(np.array(t, dtype=float) for t in doc.get("theta", [])),
            alpha=float(doc.get("alpha", 1.0)),
            beta=float(doc.get("beta", 1.0)),
            gamma=float(doc.get("gamma", 1.0)),
            nrl_gamma=np.array([doc.get("nrl_gamma", {})[n] for n in nrl_order], dtype=float),
            nrl_gamma_names=tuple(nrl_order),
            frozen_phi=frozenset(doc.get("frozen", ())),
        )
    except (KeyError, TypeError) as exc:
        raise InputError(f"parameter document is malformed: {exc}") from exc


def save_params(path, params: ModelParams) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(params), fh, indent=2)
        fh.write("\n")


def load_params(path, graph: LinkGraph | None = None, n_layers: int | None = None) -> ModelParams:
    """Load parameters, optionally validating against a graph and layer count."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}", path) from exc
    params = params_from_dict(doc)
    if n_layers is not None and params.n_layers != n_layers:
        raise DimensionError(
            f"parameter file has {params.n_layers} residual layers, expected {n_layers}"
        )
    if graph is not None:
        for m, t in enumerate(params.theta, start=1):
            if t.shape != (graph.link_count, graph.link_count):
                raise DimensionError(
                    f"theta layer {m} is {t.shape}, graph has {graph.link_count} links"
                )
    return params


TOY_LINKS = (
    ("0-1", "0", "1", 0.0),
    ("1-2", "1", "2", 1.0),
    ("2-3", "2", "3", 2.0),
    ("2-4", "2", "4", 1.0),
    ("4-3", "4", "3", 1.0),
    ("3-5", "3", "5", 1.0),
    ("4-5", "4", "5", 2.0),
    ("1-5", "1", "5", 4.0),
    ("5-6", "5", "6", 0.0),
)

TOY_PATHS = {
    "path1": (0, 1, 2, 5, 8),
    "path2": (0, 1, 3, 4, 5, 8),
    "path3": (0, 1, 3, 6, 8),
    "path4": (0, 7, 8),
}

TOY_COUNTS_BEFORE = {"path1": 19, "path2": 14, "path3": 19, "path4": 48}
TOY_COUNTS_AFTER = {"path1": 25, "path2": 24, "path4": 51}
TOY_REMOVED_LINK = 6
TOY_ORIGIN = 0
TOY_DESTINATION = 8


@dataclass(frozen=True, eq=False)
class ToyFixture:
    """The embedded 7-node, 9-link example with its two observation periods."""

    graph: LinkGraph
    features: FeatureTensor
    trajectories_before: TrajectorySet
    graph_removed: LinkGraph
    features_removed: FeatureTensor
    trajectories_after: TrajectorySet
    paths: dict
    removed_link: int
    origin: int
    destination: int


def _expand_counts(counts: dict, period: str) -> TrajectorySet:
    ids, paths = [], []
    for name in sorted(counts):
        for i in range(counts[name]):
            ids.append(f"{period}-{name}-{i:02d}")
            paths.append(TOY_PATHS[name])
    return TrajectorySet(tuple(ids), tuple(paths), tuple("train" for _ in ids))


def toy_fixture() -> ToyFixture:
    """Build the embedded toy network and both observation periods.

    One link is removed between the periods; observation counts per path
    are 19/14/19/48 before the removal and 25/24/51 after it.
    """
    links = tuple(Link(lid, tail, head) for lid, tail, head, _ in TOY_LINKS)
    times = np.array([t for *_, t in TOY_LINKS])
    graph = make_graph(links, {"travel_time": times})
    features = build_features(graph, ["travel_time"])
    graph_removed = remove_link(graph, TOY_REMOVED_LINK)
    features_removed = build_features(graph_removed, ["travel_time"])
    return ToyFixture(
        graph=graph,
        features=features,
        trajectories_before=_expand_counts(TOY_COUNTS_BEFORE, "before"),
        graph_removed=graph_removed,
        features_removed=features_removed,
        trajectories_after=_expand_counts(TOY_COUNTS_AFTER, "after"),
        paths=dict(TOY_PATHS),
        removed_link=TOY_REMOVED_LINK,
        origin=TOY_ORIGIN,
        destination=TOY_DESTINATION,
    )
