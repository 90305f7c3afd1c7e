"""Full-ranking Recall@K / NDCG@K with the original-positives filtering caveat.

Ranking order is score descending with ties broken by lower item index.
By default the candidate filter is each user's ORIGINAL training positives
(the snapshot taken before any edge editing); the ``current_positives``
policy filters by the supplied supervision edges instead, which makes the
evaluation caveat of train-set editing measurable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .corpus import InteractionSet, SplitDataset

POLICIES = ("original_positives", "current_positives")


@dataclass(frozen=True)
class MetricsReport:
    ks: tuple
    recall: dict
    ndcg: dict
    users: int
    filter_policy: str

    def to_dict(self) -> dict:
        out = {str(k): {"recall": self.recall[k], "ndcg": self.ndcg[k]} for k in self.ks}
        out["users"] = self.users
        out["filter_policy"] = self.filter_policy
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def flat(self) -> dict:
        row = {}
        for k in self.ks:
            row[f"recall@{k}"] = self.recall[k]
            row[f"ndcg@{k}"] = self.ndcg[k]
        return row


def rank_items(model, u: int, filter_set) -> np.ndarray:
    """Full item ordering for user u; filtered items sink to the bottom.

    Filtered items get score -inf, so they trail every unfiltered item,
    ordered among themselves by index.
    """
    scores = model.score(u).astype(np.float64)
    if len(filter_set):
        scores[np.fromiter(filter_set, dtype=np.int64)] = -np.inf
    return np.argsort(-scores, kind="stable")


def recall_at_k(ranked: np.ndarray, truth, k: int) -> float:
    """|top-k intersect truth| / |truth|."""
    if len(truth) == 0:
        raise ValueError("empty truth set")
    truth = set(int(t) for t in truth)
    hits = sum(1 for item in ranked[:k].tolist() if item in truth)
    return hits / len(truth)


def ndcg_at_k(ranked: np.ndarray, truth, k: int) -> float:
    """Binary-gain NDCG with log2(p+1) discount; IDCG over min(k, |truth|)."""
    if len(truth) == 0:
        raise ValueError("empty truth set")
    truth = set(int(t) for t in truth)
    positions = [p + 1 for p, item in enumerate(ranked[:k].tolist()) if item in truth]
    return _ndcg_from_positions(positions, len(truth), k)


def _ndcg_from_positions(positions, n_truth: int, k: int) -> float:
    """positions are 1-based hit ranks in ascending order."""
    dcg = 0.0
    for p in positions:
        dcg += 1.0 / math.log2(p + 1)
    ideal = 0.0
    for p in range(1, min(k, n_truth) + 1):
        ideal += 1.0 / math.log2(p + 1)
    return dcg / ideal


def _filter_arrays(split: SplitDataset, policy: str, truth_part: str,
                   supervision_edges):
    if truth_part == "val" or policy == "original_positives":
        return split.original_user_positive_arrays
    sup = supervision_edges if supervision_edges is not None else split.train
    return sup.user_items


def evaluate(model, split: SplitDataset, ks=(10, 20), policy="original_positives",
             truth_part="test", supervision_edges: InteractionSet = None,
             batch_users: int = 4096) -> MetricsReport:
    """Average Recall@K / NDCG@K over users with at least one truth item.

    ``truth_part`` selects test (default) or val edges as ground truth; at
    validation time the candidate filter covers train positives only, so
    validation items stay rankable.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if truth_part not in ("test", "val"):
        raise ValueError(f"unknown truth_part {truth_part!r}")
    truth_items = (split.test if truth_part == "test" else split.val).user_items
    filter_arrays = _filter_arrays(split, policy, truth_part, supervision_edges)

    ks = tuple(sorted(ks))
    recall_sums = {k: 0.0 for k in ks}
    ndcg_sums = {k: 0.0 for k in ks}
    users_counted = 0
    n_items = split.num_items
    col_idx = np.arange(n_items, dtype=np.int64)
    eval_users = [u for u in range(split.num_users) if len(truth_items[u]) > 0]

    for start in range(0, len(eval_users), batch_users):
        chunk = eval_users[start:start + batch_users]
        scores = model.score_batch(chunk)

        frows, fitems = [], []
        prows, pitems, seg = [], [], [0]
        for row, u in enumerate(chunk):
            filt = filter_arrays[u]
            if len(filt):
                frows.append(np.full(len(filt), row, dtype=np.int64))
                fitems.append(filt)
            truth = truth_items[u]
            prows.append(np.full(len(truth), row, dtype=np.int64))
            pitems.append(truth)
            seg.append(seg[-1] + len(truth))
        if frows:
            scores[np.concatenate(frows), np.concatenate(fitems)] = -np.inf
        prows = np.concatenate(prows)
        pitems = np.concatenate(pitems)

        # 0-based rank of every truth item: count strictly-greater scores plus
        # equal scores at lower item index (matches stable argsort order)
        ranks = np.empty(len(prows), dtype=np.int64)
        pair_block = max(1, 2_000_000 // n_items)
        for ps in range(0, len(prows), pair_block):
            pr = prows[ps:ps + pair_block]
            pi = pitems[ps:ps + pair_block]
            sel = scores[pr]
            st = scores[pr, pi]
            greater = (sel > st[:, None]).sum(axis=1)
            eq_lower = ((sel == st[:, None]) & (col_idx[None, :] < pi[:, None])).sum(axis=1)
            ranks[ps:ps + pair_block] = greater + eq_lower
        ranks = ranks.tolist()

        for row, u in enumerate(chunk):
            user_ranks = sorted(ranks[seg[row]:seg[row + 1]])
            n_truth = seg[row + 1] - seg[row]
            users_counted += 1
            for k in ks:
                positions = [r + 1 for r in user_ranks if r < k]
                recall_sums[k] += len(positions) / n_truth
                ndcg_sums[k] += _ndcg_from_positions(positions, n_truth, k)

    if users_counted == 0:
        recall = {k: 0.0 for k in ks}
        ndcg = {k: 0.0 for k in ks}
    else:
        recall = {k: recall_sums[k] / users_counted for k in ks}
        ndcg = {k: ndcg_sums[k] / users_counted for k in ks}
    return MetricsReport(ks, recall, ndcg, users_counted, policy)
