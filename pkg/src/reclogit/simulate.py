"""Trajectory simulation from a fitted or ground-truth model."""

from __future__ import annotations

import numpy as np

from .context import ModelContext
from .exceptions import NumericError
from .io import TrajectorySet

_MAX_RESAMPLES = 20


def sample_trajectories(
    ctx: ModelContext,
    od_pairs,
    n_per_od: int,
    seed: int = 42,
    max_steps: int | None = None,
) -> TrajectorySet:
    """Roll out next-link choices from the model's probabilities.

    Walks that exceed ``max_steps`` (default 4x the link count) are
    resampled a bounded number of times before raising; on networks with
    strongly negative utilities this never triggers in practice.
    """
    rng = np.random.default_rng(seed)
    if max_steps is None:
        max_steps = 4 * ctx.graph.link_count
    ids, paths = [], []
    counter = 0
    for origin, destination in od_pairs:
        cm = ctx.choices(destination, origin)
        for _ in range(n_per_od):
            for _attempt in range(_MAX_RESAMPLES):
                path = [int(origin)]
                current = int(origin)
                for _ in range(max_steps):
                    if current == destination:
                        break
                    row = cm.P[current]
                    total = row.sum()
                    if total <= 0:
                        raise NumericError(
                            f"no feasible continuation from link {current} toward {destination}"
                        )
                    current = int(rng.choice(len(row), p=row / total))
                    path.append(current)
                if current == destination:
                    break
            else:
                raise NumericError(
                    f"sampling kept exceeding {max_steps} steps for OD ({origin}, {destination})"
                )
            ids.append(f"sim-{counter:06d}")
            paths.append(tuple(path))
            counter += 1
    return TrajectorySet(tuple(ids), tuple(paths), tuple("train" for _ in ids))
