"""Seeded injection of the two untrustworthiness types.

Modality misalignment permutes feature rows within a sampled item subset;
interaction noise uniformly deletes train edges or adds non-existing pairs.
Both are pure functions of (input, ratio, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import FeatureTable, InteractionSet
from .rng import substream


@dataclass(frozen=True)
class CorruptionSpec:
    eta_m: dict = field(default_factory=dict)  # modality -> ratio in [0, 0.5]
    eta_e: float = 0.0                         # signed edge ratio in [-0.5, 0.5]
    seed: int = 0

    def __post_init__(self):
        for m, eta in self.eta_m.items():
            if not 0.0 <= eta <= 0.5:
                raise ValueError(f"eta_m[{m}]={eta} outside [0, 0.5]")
        if abs(self.eta_e) > 0.5:
            raise ValueError(f"eta_e={self.eta_e} outside [-0.5, 0.5]")


@dataclass(frozen=True, eq=False)
class PermRecord:
    """Row permutation applied to one modality: new[subset[k]] = old[source[k]]."""

    modality: str
    subset: np.ndarray   # sorted corrupted item indices
    source: np.ndarray   # same length; bijection onto subset

    def __post_init__(self):
        subset = np.asarray(self.subset, dtype=np.int64)
        source = np.asarray(self.source, dtype=np.int64)
        if subset.shape != source.shape:
            raise ValueError("subset/source length mismatch")
        if not np.array_equal(np.sort(source), subset):
            raise ValueError("source is not a bijection onto subset")
        subset.setflags(write=False)
        source.setflags(write=False)
        object.__setattr__(self, "subset", subset)
        object.__setattr__(self, "source", source)

    def apply(self, rows: np.ndarray) -> np.ndarray:
        out = rows.copy()
        out[self.subset] = rows[self.source]
        return out

    def save_tsv(self, path) -> None:
        with open(Path(path), "w", encoding="utf-8") as fh:
            fh.write("dest_index\tsource_index\n")
            for d, s in zip(self.subset.tolist(), self.source.tolist()):
                fh.write(f"{d}\t{s}\n")


def permute_modality(features: FeatureTable, eta_m: float, seed: int):
    """Permute rows within a uniform subset of floor(eta_m * N) items.

    The permutation is uniform over the subset (fixed points allowed);
    rows outside the subset are untouched.
    """
    if not 0.0 <= eta_m <= 0.5:
        raise ValueError("eta_m must be in [0, 0.5]")
    n = features.num_items
    stream = substream(seed, f"corrupt.features.{features.modality}")
    k = int(np.floor(eta_m * n))
    subset = np.sort(stream.sample(n, k))
    source = subset[stream.permutation(k)] if k else subset.copy()
    record = PermRecord(features.modality, subset, source)
    return FeatureTable(features.modality, record.apply(features.rows)), record


def corrupt_edges(train: InteractionSet, eta_e: float, seed: int) -> InteractionSet:
    """Delete (eta_e < 0) or add (eta_e > 0) floor(|eta_e| * |E|) edges uniformly.

    Added pairs are sampled by rejection from pairs absent in train; they may
    coincide with val/test pairs by design.
    """
    if abs(eta_e) > 0.5:
        raise ValueError("|eta_e| must be <= 0.5")
    if eta_e == 0.0:
        return InteractionSet(train.num_users, train.num_items, train.edges.copy())
    stream = substream(seed, "corrupt.edges")
    e = train.num_edges
    k = int(np.floor(abs(eta_e) * e))
    if k == 0:
        return InteractionSet(train.num_users, train.num_items, train.edges.copy())

    if eta_e < 0:
        drop = set(stream.sample(e, k).tolist())
        keep = [idx for idx in range(e) if idx not in drop]
        return InteractionSet(train.num_users, train.num_items, train.edges[keep])

    capacity = train.num_users * train.num_items - e
    if capacity < k:
        raise ValueError(f"cannot add {k} edges: only {capacity} non-existing pairs")
    existing = set(train.edge_set)
    added = []
    attempts = 0
    while len(added) < k:
        want = k - len(added)
        us = stream.randint(train.num_users, 2 * want)
        its = stream.randint(train.num_items, 2 * want)
        for u, i in zip(us.tolist(), its.tolist()):
            pair = (u, i)
            if pair not in existing:
                existing.add(pair)
                added.append(pair)
                if len(added) == k:
                    break
        attempts += 1
        if attempts > 10000:
            raise RuntimeError("edge addition failed to converge")
    all_edges = np.vstack([train.edges, np.asarray(added, dtype=np.int64)])
    return InteractionSet(train.num_users, train.num_items, all_edges)


def save_edge_audit(original: InteractionSet, corrupted: InteractionSet, path) -> None:
    """Write added/removed edge lists as a TSV audit file."""
    removed = sorted(original.edge_set - corrupted.edge_set)
    added = sorted(corrupted.edge_set - original.edge_set)
    with open(Path(path), "w", encoding="utf-8") as fh:
        fh.write("op\tuser\titem\n")
        for u, i in removed:
            fh.write(f"-\t{u}\t{i}\n")
        for u, i in added:
            fh.write(f"+\t{u}\t{i}\n")
