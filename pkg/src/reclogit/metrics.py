"""Evaluation metrics over held-out trajectories.

ACP averages the modeled probability of each observed trajectory. JSD
compares the model's next-link distribution against the empirical one at
every observed predecessor link, in base-2 logs so values live in [0, 1].
BLEU scores the greedy most-probable route against the observation as a
token sequence of link ids.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .context import ModelContext
from .exceptions import IncompleteRouteError
from .io import TrajectorySet
from .solver import most_probable_route

BLEU_MAX_ORDER = 4


@dataclass(frozen=True)
class MetricsReport:
    """One model's scores on one evaluation set."""

    ll: float
    acp: float
    jsd: float
    bleu: float
    n_trajectories: int
    detail: tuple | None = None

    def to_dict(self) -> dict:
        return {
            "ll": self.ll,
            "acp": self.acp,
            "jsd": self.jsd,
            "bleu": self.bleu,
            "n_trajectories": self.n_trajectories,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @staticmethod
    def csv_header() -> str:
        return "model,ll,acp,jsd,bleu,n_trajectories"

    def to_csv_row(self, label: str) -> str:
        return (
            f"{label},{self.ll!r},{self.acp!r},{self.jsd!r},{self.bleu!r},{self.n_trajectories}"
        )


def acp(trajs: TrajectorySet, ctx: ModelContext) -> float:
    """Mean over trajectories of the product of step probabilities."""
    probs = [math.exp(ctx.trajectory_log_probability(p)) for p in trajs.paths]
    return float(np.mean(probs))


def _jsd_base2(p: np.ndarray, q: np.ndarray) -> float:
    m = 0.5 * (p + q)

    def kl(a):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / m[mask])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def empirical_next_link(trajs: TrajectorySet, n_links: int, by_destination: bool = False) -> dict:
    """Observed next-link frequencies keyed by predecessor link.

    With ``by_destination`` the conditioning key becomes (link,
    destination); the default pools transitions over destinations.
    """
    counts: dict = {}
    for path in trajs.paths:
        dest = path[-1]
        for k, a in zip(path[:-1], path[1:]):
            key = (k, dest) if by_destination else k
            row = counts.setdefault(key, np.zeros(n_links))
            row[a] += 1.0
    return {key: row / row.sum() for key, row in counts.items()}


def jsd(trajs: TrajectorySet, ctx: ModelContext, by_destination: bool = False) -> float:
    """Mean per-trajectory divergence between empirical and modeled steps.

    Each observed step contributes the base-2 Jensen-Shannon divergence
    between the empirical next-link distribution at its predecessor and
    the model's distribution conditional on the trajectory's destination;
    steps average within a trajectory, trajectories average equally.
    """
    empirical = empirical_next_link(trajs, ctx.graph.link_count, by_destination)
    per_traj = []
    for path in trajs.paths:
        if len(path) < 2:
            continue
        dest = path[-1]
        cm = ctx.choices(dest, path[0])
        values = []
        for k in path[:-1]:
            key = (k, dest) if by_destination else k
            values.append(_jsd_base2(empirical[key], cm.P[k]))
        per_traj.append(float(np.mean(values)))
    return float(np.mean(per_traj)) if per_traj else 0.0


def _ngram_counts(tokens, order):
    return Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))


def sentence_bleu(candidate, reference, max_order: int = BLEU_MAX_ORDER) -> float:
    """Sentence-level BLEU with uniform n-gram weights and brevity penalty.

    The order is capped at the shorter sequence's length (weights
    renormalized uniformly) so short exact matches still score 1.
    """
    candidate = list(candidate)
    reference = list(reference)
    if not candidate or not reference:
        return 0.0
    order = max(1, min(max_order, len(candidate), len(reference)))
    log_precisions = []
    for n in range(1, order + 1):
        cand = _ngram_counts(candidate, n)
        ref = _ngram_counts(reference, n)
        overlap = sum(min(count, ref[gram]) for gram, count in cand.items())
        total = max(1, len(candidate) - n + 1)
        if overlap == 0:
            return 0.0
        log_precisions.append(math.log(overlap / total))
    score = math.exp(sum(log_precisions) / order)
    if len(candidate) < len(reference):
        score *= math.exp(1.0 - len(reference) / len(candidate))
    return float(score)


def bleu4(trajs: TrajectorySet, ctx: ModelContext, max_steps: int | None = None):
    """Mean BLEU of greedy generated routes against the observations.

    A generation failure (dead end or step cap) scores 0 for that
    trajectory and is flagged in the returned detail list.
    """
    scores = []
    failures = []
    for tid, path in zip(trajs.ids, trajs.paths):
        origin, dest = path[0], path[-1]
        try:
            cm = ctx.choices(dest, origin)
            generated = most_probable_route(cm, origin, dest, max_steps)
        except IncompleteRouteError:
            scores.append(0.0)
            failures.append(tid)
            continue
        scores.append(sentence_bleu(generated, path))
    return float(np.mean(scores)), failures


def evaluate_model(trajs: TrajectorySet, ctx: ModelContext,
                   by_destination: bool = False) -> MetricsReport:
    """All metrics plus the total log-likelihood on one evaluation set."""
    lls = [ctx.trajectory_log_probability(p) for p in trajs.paths]
    bleu_score, failures = bleu4(trajs, ctx)
    return MetricsReport(
        ll=float(np.sum(lls)),
        acp=float(np.mean([math.exp(v) for v in lls])),
        jsd=jsd(trajs, ctx, by_destination),
        bleu=bleu_score,
        n_trajectories=len(trajs),
        detail=tuple(failures) if failures else None,
    )
