"""Collaborative-filtering core: LightGCN propagation, three scorers, BPR trainer.

Scorer kinds:
  * ``lightgcn``      dot(avg e_u, avg e_i) over layer-averaged propagated embeddings
  * ``vbpr``          dot(e_u, e_i) + sum_m dot(theta_u^m, W_m f_i^m), no propagation
  * ``modality_knn``  dot(avg e_u, avg e_i + item-graph-smoothed projected features)

Sparse graphs are scipy CSR matrices.  Parameters are float32 by default;
a float64 mode exists for gradient checking.  Losses and metrics accumulate
in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .corpus import FeatureTable, InteractionSet, SplitDataset
from .rng import SplitMix64, substream

KINDS = ("lightgcn", "vbpr", "modality_knn")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    l2: float = 1e-4
    batch_size: int = 2048
    eval_batch_size: int = 4096
    max_epochs: int = 1000
    patience: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.eval_batch_size <= 0:
            raise ValueError("rates and sizes must be positive")
        if self.max_epochs <= 0 or self.patience <= 0:
            raise ValueError("max_epochs and patience must be positive")


class EmbeddingModel:
    """User/item embedding tables plus per-kind extras and a propagation cache."""

    def __init__(self, kind, num_users, num_items, dim, num_layers=2,
                 features=None, item_graph=None, knn_k=None, dtype=np.float32):
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}")
        self.kind = kind
        self.num_users = num_users
        self.num_items = num_items
        self.dim = dim
        self.num_layers = num_layers
        self.dtype = np.dtype(dtype)
        self.features = dict(features) if features else {}
        self.item_graph = item_graph
        self.knn_k = knn_k
        self.params = {}
        self._avg = None  # (M+N, d) propagation cache

    @property
    def modalities(self):
        return sorted(self.features)

    @property
    def user0(self):
        return self.params["user0"]

    @property
    def item0(self):
        return self.params["item0"]

    def needs_propagation(self) -> bool:
        return self.kind in ("lightgcn", "modality_knn")

    def invalidate(self):
        self._avg = None

    def averaged(self):
        if self._avg is None:
            raise RuntimeError("model not propagated; call propagate() first")
        return self._avg[:self.num_users], self._avg[self.num_users:]

    # -- parameter plumbing ------------------------------------------------

    def copy_params(self):
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, params):
        self.params = {k: v.copy() for k, v in params.items()}
        self.invalidate()

    # -- scoring -----------------------------------------------------------

    def item_representations(self):
        """Item-side vectors entering the final dot product."""
        if self.kind == "lightgcn":
            _, avg_item = self.averaged()
            return avg_item
        if self.kind == "modality_knn":
            _, avg_item = self.averaged()
            return avg_item + self.item_graph @ self._projected_features()
        raise RuntimeError("vbpr has no single item representation")

    def _projected_features(self):
        z = np.zeros((self.num_items, self.dim), dtype=self.dtype)
        for m in self.modalities:
            z += self.features[m].rows.astype(self.dtype) @ self.params[f"proj.{m}"].T
        return z

    def score_batch(self, users) -> np.ndarray:
        """Scores over all items for the given users, float64 (B, N)."""
        users = np.asarray(users, dtype=np.int64)
        if self.kind == "vbpr":
            s = self.user0[users].astype(np.float64) @ self.item0.T.astype(np.float64)
            for m in self.modalities:
                q = self.features[m].rows.astype(np.float64) @ self.params[f"proj.{m}"].T.astype(np.float64)
                s += self.params[f"pref.{m}"][users].astype(np.float64) @ q.T
            return s
        avg_user, _ = self.averaged()
        reprs = self.item_representations()
        return avg_user[users].astype(np.float64) @ reprs.T.astype(np.float64)

    def score(self, u: int, items=None) -> np.ndarray:
        s = self.score_batch([u])[0]
        return s if items is None else s[np.asarray(items, dtype=np.int64)]


def init_embeddings(num_users, num_items, dim, seed, kind="lightgcn", num_layers=2,
                    features=None, item_graph=None, knn_k=None, dtype=np.float32) -> EmbeddingModel:
    """Xavier-uniform initialization of all tables for the requested scorer kind."""
    if dim <= 0:
        raise ValueError("dim must be positive")
    model = EmbeddingModel(kind, num_users, num_items, dim, num_layers,
                           features, item_graph, knn_k, dtype)
    stream = substream(seed, "backbone.init")

    def xavier(shape):
        bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        u = stream.uniform(shape[0] * shape[1]).reshape(shape)
        return ((2.0 * u - 1.0) * bound).astype(dtype)

    model.params["user0"] = xavier((num_users, dim))
    model.params["item0"] = xavier((num_items, dim))
    if kind == "vbpr":
        for m in model.modalities:
            model.params[f"proj.{m}"] = xavier((dim, model.features[m].dim))
            model.params[f"pref.{m}"] = xavier((num_users, dim))
    elif kind == "modality_knn":
        if item_graph is None:
            raise ValueError("modality_knn needs an item graph")
        for m in model.modalities:
            model.params[f"proj.{m}"] = xavier((dim, model.features[m].dim))
    return model


# ---------------------------------------------------------------------------
# Graphs


def build_norm_adjacency(train: InteractionSet) -> sp.csr_matrix:
    """Symmetric-normalized bipartite adjacency over M+N nodes.

    Edge (u, i) carries 1/sqrt(deg(u) * deg(i)) in both directions;
    zero-degree nodes have empty rows.
    """
    m, n = train.num_users, train.num_items
    udeg = train.user_degrees().astype(np.float64)
    ideg = train.item_degrees().astype(np.float64)
    if train.num_edges == 0:
        return sp.csr_matrix((m + n, m + n))
    u = train.edges[:, 0]
    i = train.edges[:, 1]
    vals = 1.0 / np.sqrt(udeg[u] * ideg[i])
    rows = np.concatenate([u, i + m])
    cols = np.concatenate([i + m, u])
    data = np.concatenate([vals, vals])
    return sp.csr_matrix((data, (rows, cols)), shape=(m + n, m + n))


def _cosine_topk_rows(feats: np.ndarray, k: int, block: int = 512):
    """Per-row top-k cosine neighbors (self excluded, ties to lower index)."""
    n = feats.shape[0]
    norms = np.linalg.norm(feats, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = feats / safe[:, None]
    k = min(k, n - 1)
    nbrs = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, block):
        stop = min(start + block, n)
        sims = unit[start:stop] @ unit.T
        sims[np.arange(start, stop) - start, np.arange(start, stop)] = -np.inf
        order = np.argsort(-sims, axis=1, kind="stable")
        nbrs[start:stop] = order[:, :k]
    return nbrs


def build_item_knn_graph(features: dict, k: int) -> sp.csr_matrix:
    """Item-item graph: per-modality cosine top-k, equal-weight average, rows L1-normalized."""
    if k < 1:
        raise ValueError("k must be >= 1")
    tables = [features[m] for m in sorted(features)]
    n = tables[0].num_items
    acc = sp.csr_matrix((n, n))
    for table in tables:
        nbrs = _cosine_topk_rows(table.rows.astype(np.float64), k)
        kk = nbrs.shape[1]
        rows = np.repeat(np.arange(n), kk)
        adj = sp.csr_matrix((np.ones(n * kk), (rows, nbrs.ravel())), shape=(n, n))
        acc = acc + adj * (1.0 / len(tables))
    rowsum = np.asarray(acc.sum(axis=1)).ravel()
    inv = np.where(rowsum > 0, 1.0 / np.where(rowsum > 0, rowsum, 1.0), 0.0)
    return sp.diags(inv) @ acc


def propagate(graph: sp.csr_matrix, model: EmbeddingModel, num_layers=None):
    """Run layer propagation e^(l+1) = A e^(l) and cache the 0..L layer mean."""
    layers = model.num_layers if num_layers is None else num_layers
    if layers < 0:
        raise ValueError("num_layers must be >= 0")
    e0 = np.vstack([model.user0, model.item0]).astype(model.dtype)
    adj = graph.astype(model.dtype)
    acc = e0.copy()
    x = e0
    for _ in range(layers):
        x = adj @ x
        acc += x
    avg = acc / (layers + 1)
    model._avg = avg
    return avg[:model.num_users], avg[model.num_users:]


def _propagation_backward(graph, grad_avg, layers, dtype):
    """Gradient of the layer-averaged output w.r.t. e^(0); graph is symmetric."""
    adj = graph.astype(dtype)
    acc = grad_avg
    total = grad_avg.copy()
    for _ in range(layers):
        acc = adj @ acc
        total += acc
    return total / (layers + 1)


def _scatter_add(out: np.ndarray, idx: np.ndarray, vecs: np.ndarray):
    """out[idx[b]] += vecs[b] with deterministic in-order accumulation."""
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    svecs = vecs[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    sums = np.add.reduceat(svecs, starts, axis=0)
    out[sidx[starts]] += sums


# ---------------------------------------------------------------------------
# BPR loss and gradients


def _softplus(x):
    return np.logaddexp(0.0, x)


def bpr_loss_and_grads(model: EmbeddingModel, users, pos, neg, l2: float, graph=None):
    """Batch-mean BPR loss with L2 on touched embedding rows, plus exact gradients.

    Returns (loss, grads) where grads maps parameter names to dense arrays of
    the same shape.  Pure: the model is not mutated.
    """
    users = np.asarray(users, dtype=np.int64)
    pos = np.asarray(pos, dtype=np.int64)
    neg = np.asarray(neg, dtype=np.int64)
    b = len(users)
    m, n, d = model.num_users, model.num_items, model.dim
    dtype = model.dtype
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}

    if model.kind == "vbpr":
        u0, i0 = model.user0, model.item0
        eu = u0[users]
        scores_i = np.einsum("bd,bd->b", eu, i0[pos], dtype=np.float64)
        scores_j = np.einsum("bd,bd->b", eu, i0[neg], dtype=np.float64)
        fq = {}
        for mod in model.modalities:
            q = model.features[mod].rows.astype(dtype) @ model.params[f"proj.{mod}"].T
            fq[mod] = q
            theta = model.params[f"pref.{mod}"][users]
            scores_i += np.einsum("bd,bd->b", theta, q[pos], dtype=np.float64)
            scores_j += np.einsum("bd,bd->b", theta, q[neg], dtype=np.float64)
        diff = scores_i - scores_j
        coef = (-_sigmoid(-diff) / b).astype(dtype)

        _scatter_add(grads["user0"], users, coef[:, None] * (i0[pos] - i0[neg]))
        _scatter_add(grads["item0"], pos, coef[:, None] * eu)
        _scatter_add(grads["item0"], neg, -coef[:, None] * eu)
        for mod in model.modalities:
            theta = model.params[f"pref.{mod}"][users]
            q = fq[mod]
            _scatter_add(grads[f"pref.{mod}"], users, coef[:, None] * (q[pos] - q[neg]))
            feats = model.features[mod].rows.astype(dtype)
            dq = (coef[:, None] * theta)
            grads[f"proj.{mod}"] += dq.T @ (feats[pos] - feats[neg])

        reg = _l2_rows(model, grads, users, pos, neg, l2,
                       extra_user_tables=[f"pref.{mod}" for mod in model.modalities])
        loss = float(np.mean(_softplus(-diff))) + reg
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"non-finite BPR loss (diff range {diff.min()}..{diff.max()})")
        return loss, grads

    # graph-based kinds
    if graph is None:
        raise ValueError("graph-based kinds need the propagation graph")
    e0 = np.vstack([model.user0, model.item0]).astype(dtype)
    adj = graph.astype(dtype)
    acc = e0.copy()
    x = e0
    for _ in range(model.num_layers):
        x = adj @ x
        acc += x
    avg = acc / (model.num_layers + 1)
    avg_user, avg_item = avg[:m], avg[m:]

    if model.kind == "modality_knn":
        z = model._projected_features()
        smooth = (model.item_graph.astype(dtype) @ z)
        reprs = avg_item + smooth
    else:
        reprs = avg_item

    au = avg_user[users]
    scores_i = np.einsum("bd,bd->b", au, reprs[pos], dtype=np.float64)
    scores_j = np.einsum("bd,bd->b", au, reprs[neg], dtype=np.float64)
    diff = scores_i - scores_j
    coef = (-_sigmoid(-diff) / b).astype(dtype)

    grad_avg = np.zeros((m + n, d), dtype=dtype)
    _scatter_add(grad_avg, users, coef[:, None] * (reprs[pos] - reprs[neg]))
    grad_item_repr = np.zeros((n, d), dtype=dtype)
    _scatter_add(grad_item_repr, pos, coef[:, None] * au)
    _scatter_add(grad_item_repr, neg, -coef[:, None] * au)
    grad_avg[m:] += grad_item_repr

    grad_e0 = _propagation_backward(graph, grad_avg, model.num_layers, dtype)
    grads["user0"] += grad_e0[:m]
    grads["item0"] += grad_e0[m:]

    if model.kind == "modality_knn":
        dz = model.item_graph.T.astype(dtype) @ grad_item_repr
        for mod in model.modalities:
            feats = model.features[mod].rows.astype(dtype)
            grads[f"proj.{mod}"] += dz.T @ feats

    reg = _l2_rows(model, grads, users, pos, neg, l2)
    loss = float(np.mean(_softplus(-diff))) + reg
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite BPR loss (diff range {diff.min()}..{diff.max()})")
    return loss, grads


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _l2_rows(model, grads, users, pos, neg, l2, extra_user_tables=()):
    """L2 on the ego-embedding rows touched by the batch; returns the loss term."""
    b = len(users)
    if l2 == 0.0:
        return 0.0
    u0, i0 = model.user0, model.item0
    reg = (np.einsum("bd,bd->", u0[users], u0[users], dtype=np.float64)
           + np.einsum("bd,bd->", i0[pos], i0[pos], dtype=np.float64)
           + np.einsum("bd,bd->", i0[neg], i0[neg], dtype=np.float64))
    scale = np.asarray(l2 / b, dtype=model.dtype)
    _scatter_add(grads["user0"], users, scale * u0[users])
    _scatter_add(grads["item0"], pos, scale * i0[pos])
    _scatter_add(grads["item0"], neg, scale * i0[neg])
    for name in extra_user_tables:
        tab = model.params[name]
        reg += np.einsum("bd,bd->", tab[users], tab[users], dtype=np.float64)
        _scatter_add(grads[name], users, scale * tab[users])
    return float(l2 / (2.0 * b) * reg)


class Adam:
    """Dense Adam over named parameter tables."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            mk = self.m[k]
            vk = self.v[k]
            mk *= self.beta1
            mk += (1.0 - self.beta1) * g
            vk *= self.beta2
            vk += (1.0 - self.beta2) * g * g
            params[k] -= (self.lr / b1c) * mk / (np.sqrt(vk / b2c) + self.eps)


def bpr_step(model, users, pos, neg, config: TrainConfig, optimizer: Adam, graph=None) -> float:
    """One BPR/Adam update on a triplet batch; returns the batch loss."""
    loss, grads = bpr_loss_and_grads(model, users, pos, neg, config.l2, graph)
    optimizer.step(model.params, grads)
    model.invalidate()
    return loss


def sample_negatives(stream: SplitMix64, users, pos_sets, num_items) -> np.ndarray:
    """Uniform negatives with rejection against each user's supervision positives."""
    cand = stream.randint(num_items, len(users))
    for b, u in enumerate(users.tolist()):
        taken = pos_sets[u]
        while int(cand[b]) in taken:
            cand[b] = stream.randint_scalar(num_items)
    return cand


@dataclass
class TrainResult:
    model: EmbeddingModel
    history: list          # (epoch, mean_loss, val_recall@10 or None)
    best_epoch: int


def train(model: EmbeddingModel, split: SplitDataset, config: TrainConfig,
          propagation_edges: InteractionSet = None,
          supervision_edges: InteractionSet = None) -> TrainResult:
    """BPR training with early stopping on validation Recall@10.

    Supervision defaults to the split's train edges; propagation_edges may
    differ under graph-only editing.  With an empty validation set the loop
    runs for max_epochs and returns the final parameters.
    """
    from .evaluator import evaluate  # local import to avoid a cycle

    sup = supervision_edges if supervision_edges is not None else split.train
    prop = propagation_edges if propagation_edges is not None else split.train
    if sup.num_edges == 0:
        raise ValueError("empty supervision edge set")
    graph = build_norm_adjacency(prop) if model.needs_propagation() else None

    shuffle_stream = substream(config.seed, "train.shuffle")
    neg_stream = substream(config.seed, "train.negative")
    pos_sets = sup.user_item_sets
    edges = sup.edges
    optimizer = Adam(model.params, config.learning_rate)
    has_val = split.val.num_edges > 0

    history = []
    best_recall = -np.inf
    best_params = None
    best_epoch = 0
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        perm = shuffle_stream.permutation(len(edges))
        total = 0.0
        nb = 0
        for start in range(0, len(edges), config.batch_size):
            batch = edges[perm[start:start + config.batch_size]]
            users, pos = batch[:, 0], batch[:, 1]
            neg = sample_negatives(neg_stream, users, pos_sets, model.num_items)
            total += bpr_step(model, users, pos, neg, config, optimizer, graph)
            nb += 1
        mean_loss = total / nb
        if not has_val:
            history.append((epoch, mean_loss, None))
            continue
        if model.needs_propagation():
            propagate(graph, model)
        report = evaluate(model, split, ks=(10,), truth_part="val",
                          batch_users=config.eval_batch_size)
        recall = report.recall[10]
        history.append((epoch, mean_loss, recall))
        if recall > best_recall:
            best_recall = recall
            best_params = model.copy_params()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if has_val and best_params is not None:
        model.set_params(best_params)
    else:
        best_epoch = len(history)
    if model.needs_propagation():
        propagate(graph, model)
    return TrainResult(model, history, best_epoch)


def save_history_csv(history, path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,val_recall@10\n")
        for epoch, loss, recall in history:
            rec = "" if recall is None else repr(recall)
            fh.write(f"{epoch},{repr(loss)},{rec}\n")


# ---------------------------------------------------------------------------
# Checkpoints (TRM1)


def _write_block(fh, name, arr):
    fh.write(f"{name}\n".encode("ascii"))
    r, c = arr.shape
    fh.write(f"MMF1 {r} {c}\n".encode("ascii"))
    fh.write(arr.astype("<f4").tobytes())


def save_model(model: EmbeddingModel, path) -> None:
    """TRM1 checkpoint: header + named MMF1 blocks (includes layer-averaged tables)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"TRM1 {model.kind} {model.num_users} {model.num_items} "
                 f"{model.dim} {model.num_layers}\n".encode("ascii"))
        for name in sorted(model.params):
            _write_block(fh, name, model.params[name])
        if model._avg is not None:
            _write_block(fh, "avg_user", model._avg[:model.num_users])
            _write_block(fh, "avg_item", model._avg[model.num_users:])


def load_model(path, features=None, item_graph=None, knn_k=None) -> EmbeddingModel:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if header[0] != "TRM1":
            raise ValueError(f"{path}: not a TRM1 checkpoint")
        kind, m, n, d, layers = header[1], int(header[2]), int(header[3]), int(header[4]), int(header[5])
        blocks = {}
        while True:
            name_line = fh.readline()
            if not name_line:
                break
            name = name_line.decode("ascii").strip()
            mmf = fh.readline().decode("ascii").split()
            rows, cols = int(mmf[1]), int(mmf[2])
            payload = fh.read(4 * rows * cols)
            blocks[name] = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    model = EmbeddingModel(kind, m, n, d, layers, features, item_graph, knn_k)
    avg_user = blocks.pop("avg_user", None)
    avg_item = blocks.pop("avg_item", None)
    model.params = blocks
    if avg_user is not None and avg_item is not None:
        model._avg = np.vstack([avg_user, avg_item])
    return model
