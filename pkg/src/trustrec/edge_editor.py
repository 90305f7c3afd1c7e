"""Interaction-level edge editing driven by a collaborative prior.

A pretrained LightGCN's layer-averaged embeddings define s_ui = e_u . e_i.
Pruning removes the globally bottom-ranked share of observed train edges;
completion adds top-ranked candidates from per-user/per-item top-K pools,
with validation/test pairs dropped after selection.  Edits apply to the
supervision set, the propagation set, or both; the original-train snapshot
used for evaluation filtering is never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import InteractionSet, SplitDataset

TARGETS = ("train_only", "graph_only", "both")


@dataclass(frozen=True, eq=False)
class EditPlan:
    removals: np.ndarray      # (R, 2) subset of current train edges
    additions: np.ndarray     # (A, 2) disjoint from current train edges
    target: str
    ratio: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")
        rem = np.asarray(self.removals, dtype=np.int64).reshape(-1, 2)
        add = np.asarray(self.additions, dtype=np.int64).reshape(-1, 2)
        overlap = set(map(tuple, rem.tolist())) & set(map(tuple, add.tolist()))
        if overlap:
            raise ValueError("removals and additions overlap")
        rem.setflags(write=False)
        add.setflags(write=False)
        object.__setattr__(self, "removals", rem)
        object.__setattr__(self, "additions", add)

    @property
    def is_empty(self) -> bool:
        return self.removals.size == 0 and self.additions.size == 0


def collab_similarity(prior, pairs) -> np.ndarray:
    """s_ui = e_u . e_i over layer-averaged prior embeddings, float64."""
    avg_user, avg_item = prior.averaged()
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs[:, 0].max() >= prior.num_users
                       or pairs[:, 1].max() >= prior.num_items):
        raise IndexError("pair index out of range")
    return np.einsum("bd,bd->b",
                     avg_user[pairs[:, 0]].astype(np.float64),
                     avg_item[pairs[:, 1]].astype(np.float64))


def prune_edges(train: InteractionSet, prior, r: float, target: str = "train_only") -> EditPlan:
    """Remove the floor(r * |E|) lowest-similarity train edges (global ranking)."""
    if not 0.0 <= r < 1.0:
        raise ValueError("r must be in [0, 1)")
    n_remove = int(np.floor(r * train.num_edges))
    if n_remove == 0:
        return EditPlan(np.empty((0, 2), np.int64), np.empty((0, 2), np.int64),
                        target, r, {"op": "prune"})
    scores = collab_similarity(prior, train.edges)
    order = np.lexsort((train.edges[:, 1], train.edges[:, 0], scores))
    removals = train.edges[order[:n_remove]]
    return EditPlan(removals, np.empty((0, 2), np.int64), target, r, {"op": "prune"})


def complete_edges(train: InteractionSet, prior, r: float, k_user: int = 10,
                   k_item: int = 10, holdout=frozenset(), target: str = "train_only",
                   block: int = 1024) -> EditPlan:
    """Add up to floor(r * |E|) high-similarity non-train pairs.

    Candidates are the union of per-user top-k_user items and per-item
    top-k_item users (both excluding train pairs); the global top floor(r*|E|)
    by similarity are selected, and holdout (val/test) pairs are dropped
    afterwards without back-filling.
    """
    if not 0.0 <= r < 1.0:
        raise ValueError("r must be in [0, 1)")
    if k_user < 1 or k_item < 1:
        raise ValueError("k_user and k_item must be >= 1")
    n_add = int(np.floor(r * train.num_edges))
    if n_add == 0:
        return EditPlan(np.empty((0, 2), np.int64), np.empty((0, 2), np.int64),
                        target, r, {"op": "complete", "k_user": k_user, "k_item": k_item})

    avg_user, avg_item = prior.averaged()
    au = avg_user.astype(np.float64)
    ai = avg_item.astype(np.float64)
    m, n = train.num_users, train.num_items
    user_items = train.user_items
    item_users = [[] for _ in range(n)]
    for u, i in train.edges.tolist():
        item_users[i].append(u)

    candidates = {}

    def consider(u, i, s):
        key = (int(u), int(i))
        if key not in candidates:
            candidates[key] = float(s)

    for start in range(0, m, block):
        stop = min(start + block, m)
        sims = au[start:stop] @ ai.T
        for local, u in enumerate(range(start, stop)):
            row = sims[local].copy()
            row[user_items[u]] = -np.inf
            top = np.argsort(-row, kind="stable")[:k_user]
            for i in top:
                if row[i] > -np.inf:
                    consider(u, i, row[i])
    for start in range(0, n, block):
        stop = min(start + block, n)
        sims = ai[start:stop] @ au.T
        for local, i in enumerate(range(start, stop)):
            row = sims[local].copy()
            if item_users[i]:
                row[np.asarray(item_users[i], dtype=np.int64)] = -np.inf
            top = np.argsort(-row, kind="stable")[:k_item]
            for u in top:
                if row[u] > -np.inf:
                    consider(u, i, row[u])

    if not candidates:
        additions = np.empty((0, 2), np.int64)
    else:
        pairs = np.asarray(sorted(candidates), dtype=np.int64)
        scores = np.asarray([candidates[tuple(p)] for p in pairs.tolist()])
        order = np.lexsort((pairs[:, 1], pairs[:, 0], -scores))
        chosen = pairs[order[:n_add]]
        kept = [p for p in chosen.tolist() if tuple(p) not in holdout]
        additions = (np.asarray(kept, dtype=np.int64).reshape(-1, 2)
                     if kept else np.empty((0, 2), np.int64))
    return EditPlan(np.empty((0, 2), np.int64), additions, target, r,
                    {"op": "complete", "k_user": k_user, "k_item": k_item})


def apply_edit(split: SplitDataset, plan: EditPlan):
    """Return (supervision_edges, propagation_edges) per the plan's target."""
    train = split.train
    train_set = train.edge_set
    for pair in map(tuple, plan.removals.tolist()):
        if pair not in train_set:
            raise ValueError(f"removal {pair} not in train edges")
    for pair in map(tuple, plan.additions.tolist()):
        if pair in train_set:
            raise ValueError(f"addition {pair} already in train edges")

    edited_pairs = (train_set - set(map(tuple, plan.removals.tolist()))) \
        | set(map(tuple, plan.additions.tolist()))
    edited = InteractionSet.from_pairs(train.num_users, train.num_items, edited_pairs)
    if plan.target == "train_only":
        return edited, train
    if plan.target == "graph_only":
        return train, edited
    return edited, edited


def save_plan(plan: EditPlan, prior, path) -> None:
    """TSV serialization: op (+/-), u, i, s."""
    rem_s = collab_similarity(prior, plan.removals) if plan.removals.size else []
    add_s = collab_similarity(prior, plan.additions) if plan.additions.size else []
    with open(Path(path), "w", encoding="utf-8") as fh:
        fh.write("op\tuser\titem\tsimilarity\n")
        for (u, i), s in zip(plan.removals.tolist(), rem_s):
            fh.write(f"-\t{u}\t{i}\t{repr(float(s))}\n")
        for (u, i), s in zip(plan.additions.tolist(), add_s):
            fh.write(f"+\t{u}\t{i}\t{repr(float(s))}\n")


def load_plan(path, target: str, ratio: float) -> EditPlan:
    removals, additions = [], []
    for line in Path(path).read_text().splitlines()[1:]:
        if not line:
            continue
        op, u, i, _ = line.split("\t")
        (removals if op == "-" else additions).append((int(u), int(i)))
    return EditPlan(np.asarray(removals, np.int64).reshape(-1, 2),
                    np.asarray(additions, np.int64).reshape(-1, 2),
                    target, ratio)
