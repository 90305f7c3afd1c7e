"""Dataset model: interaction sets, splits, feature tables, synthetic benchmark.

Interactions are implicit-feedback edges over dense 0-based user/item
indices.  Feature tables are per-modality float32 matrices row-aligned to
the item index.  All containers are immutable after construction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .rng import SplitMix64, derive_seed, substream


class IngestError(Exception):
    pass


class FormatError(Exception):
    pass


def _canonical_edges(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.int64)
    if arr.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    arr = arr.reshape(-1, 2)
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    return arr[order]


@dataclass(frozen=True, eq=False)
class InteractionSet:
    """Binary interaction matrix stored as a lexicographically sorted edge list."""

    num_users: int
    num_items: int
    edges: np.ndarray  # (E, 2) int64, sorted, unique

    def __post_init__(self):
        edges = _canonical_edges(self.edges)
        if edges.size:
            if edges[:, 0].min() < 0 or edges[:, 0].max() >= self.num_users:
                raise ValueError("user index out of range")
            if edges[:, 1].min() < 0 or edges[:, 1].max() >= self.num_items:
                raise ValueError("item index out of range")
            dup = np.all(edges[1:] == edges[:-1], axis=1)
            if dup.any():
                raise ValueError("duplicate edges")
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @classmethod
    def from_pairs(cls, num_users: int, num_items: int, pairs) -> "InteractionSet":
        return cls(num_users, num_items, _canonical_edges(list(pairs)))

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @cached_property
    def edge_set(self) -> frozenset:
        return frozenset(map(tuple, self.edges.tolist()))

    @cached_property
    def user_items(self) -> tuple:
        """Per-user sorted item arrays (tuple indexed by user)."""
        out = [np.empty(0, dtype=np.int64)] * self.num_users
        if self.num_edges:
            users = self.edges[:, 0]
            bounds = np.searchsorted(users, np.arange(self.num_users + 1))
            for u in range(self.num_users):
                out[u] = self.edges[bounds[u]:bounds[u + 1], 1]
        return tuple(out)

    @cached_property
    def user_item_sets(self) -> tuple:
        return tuple(set(items.tolist()) for items in self.user_items)

    def user_degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_users, dtype=np.int64)
        if self.num_edges:
            np.add.at(deg, self.edges[:, 0], 1)
        return deg

    def item_degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_items, dtype=np.int64)
        if self.num_edges:
            np.add.at(deg, self.edges[:, 1], 1)
        return deg

    def same_edges(self, other: "InteractionSet") -> bool:
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and self.edges.shape == other.edges.shape
            and bool(np.all(self.edges == other.edges))
        )


@dataclass(frozen=True, eq=False)
class SplitDataset:
    """Train/val/test interaction sets plus the frozen evaluation filter set.

    ``original_train_positives`` is snapshotted from the train edges at
    construction and is the candidate filter for evaluation regardless of
    any later edge editing.
    """

    train: InteractionSet
    val: InteractionSet
    test: InteractionSet
    original_train_positives: frozenset = field(repr=False)

    def __post_init__(self):
        m, n = self.train.num_users, self.train.num_items
        for part in (self.val, self.test):
            if part.num_users != m or part.num_items != n:
                raise ValueError("split parts disagree on M, N")

    @classmethod
    def create(cls, train: InteractionSet, val: InteractionSet, test: InteractionSet) -> "SplitDataset":
        return cls(train, val, test, train.edge_set)

    def with_train(self, new_train: InteractionSet) -> "SplitDataset":
        """New split with replaced train edges; the filter snapshot is retaken."""
        return SplitDataset.create(new_train, self.val, self.test)

    @property
    def num_users(self) -> int:
        return self.train.num_users

    @property
    def num_items(self) -> int:
        return self.train.num_items

    @cached_property
    def original_user_positives(self) -> tuple:
        out = [set() for _ in range(self.num_users)]
        for u, i in self.original_train_positives:
            out[u].add(i)
        return tuple(out)

    @cached_property
    def original_user_positive_arrays(self) -> tuple:
        return tuple(np.fromiter(sorted(s), dtype=np.int64, count=len(s))
                     for s in self.original_user_positives)


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Dense per-item feature matrix for one modality (float32, N x d)."""

    modality: str
    rows: np.ndarray

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if rows.ndim != 2 or rows.shape[1] == 0:
            raise ValueError("feature table must be N x d with d > 0")
        if not np.all(np.isfinite(rows)):
            raise ValueError("feature table contains non-finite values")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def num_items(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True, eq=False)
class SynthTruth:
    """Ground truth for the planted-correspondence benchmark."""

    latent: np.ndarray                 # (N, d_lat) item factors
    clean_features: dict               # modality -> FeatureTable before corruption
    true_feature_rows: dict            # modality -> array, item i's clean row index

    def with_permutation(self, modality: str, subset: np.ndarray, source: np.ndarray) -> "SynthTruth":
        """Account for a feature permutation: observed[subset[k]] = clean[source[k]]."""
        rows = self.true_feature_rows[modality].copy()
        rows[source] = subset
        new_map = dict(self.true_feature_rows)
        new_map[modality] = rows
        return SynthTruth(self.latent, self.clean_features, new_map)


# ---------------------------------------------------------------------------
# Ingestion


def ingest_interactions(path, min_core: int, sidecar_prefix=None) -> InteractionSet:
    """Parse a raw tab-separated interaction file and apply min_core coring.

    Users and items with fewer than ``min_core`` interactions are removed
    alternately until a fixpoint.  Surviving raw ids get dense indices in
    first-appearance order.  When ``sidecar_prefix`` is given, the raw-to-index
    mappings are written to ``<prefix>.users.tsv`` / ``<prefix>.items.tsv``.
    """
    if min_core < 0:
        raise ValueError("min_core must be >= 0")
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc

    pairs = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise IngestError(f"{path}:{lineno}: expected raw_user<TAB>raw_item")
        key = (cols[0], cols[1])
        if key not in seen:
            seen.add(key)
            pairs.append(key)
    if not pairs:
        raise IngestError(f"{path}: no interactions")

    alive = set(pairs)
    passno = 0
    while True:
        passno += 1
        udeg, ideg = {}, {}
        for u, i in alive:
            udeg[u] = udeg.get(u, 0) + 1
            ideg[i] = ideg.get(i, 0) + 1
        bad_users = {u for u, d in udeg.items() if d < min_core}
        if bad_users:
            alive = {(u, i) for u, i in alive if u not in bad_users}
            if not alive:
                raise IngestError(f"coring emptied the dataset at pass {passno} (user filter)")
            continue
        bad_items = {i for i, d in ideg.items() if d < min_core}
        if bad_items:
            alive = {(u, i) for u, i in alive if i not in bad_items}
            if not alive:
                raise IngestError(f"coring emptied the dataset at pass {passno} (item filter)")
            continue
        break

    user_idx, item_idx = {}, {}
    edges = []
    for u, i in pairs:
        if (u, i) not in alive:
            continue
        if u not in user_idx:
            user_idx[u] = len(user_idx)
        if i not in item_idx:
            item_idx[i] = len(item_idx)
        edges.append((user_idx[u], item_idx[i]))

    if sidecar_prefix is not None:
        prefix = Path(sidecar_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        with open(f"{prefix}.users.tsv", "w", encoding="utf-8") as fh:
            for raw, idx in user_idx.items():
                fh.write(f"{raw}\t{idx}\n")
        with open(f"{prefix}.items.tsv", "w", encoding="utf-8") as fh:
            for raw, idx in item_idx.items():
                fh.write(f"{raw}\t{idx}\n")

    return InteractionSet.from_pairs(len(user_idx), len(item_idx), edges)


# ---------------------------------------------------------------------------
# Splitting


def split_dataset(inter: InteractionSet, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitDataset:
    """Per-user ratio split; val/test counts are floored, train keeps the rest.

    Users with fewer than 3 interactions contribute everything to train.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three non-negative values summing to 1")
    stream = substream(seed, "split")
    tr, va, te = [], [], []
    for u in range(inter.num_users):
        items = inter.user_items[u]
        n = len(items)
        if n == 0:
            continue
        if n < 3:
            tr.extend((u, i) for i in items.tolist())
            continue
        n_val = int(np.floor(ratios[1] * n))
        n_test = int(np.floor(ratios[2] * n))
        shuffled = items[stream.permutation(n)]
        n_train = n - n_val - n_test
        tr.extend((u, i) for i in shuffled[:n_train].tolist())
        va.extend((u, i) for i in shuffled[n_train:n_train + n_val].tolist())
        te.extend((u, i) for i in shuffled[n_train + n_val:].tolist())
    m, n_items = inter.num_users, inter.num_items
    return SplitDataset.create(
        InteractionSet.from_pairs(m, n_items, tr),
        InteractionSet.from_pairs(m, n_items, va),
        InteractionSet.from_pairs(m, n_items, te),
    )


# ---------------------------------------------------------------------------
# Feature file I/O (MMF1 binary + CSV variant)


def save_features(table: FeatureTable, path) -> None:
    """Write a feature table; '.csv' suffix selects the CSV variant."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, d = table.rows.shape
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["item_index"] + [f"f{j}" for j in range(d)])
            for i in range(n):
                writer.writerow([i] + [repr(float(np.float32(x))) for x in table.rows[i]])
    else:
        with open(path, "wb") as fh:
            fh.write(f"MMF1 {n} {d}\n".encode("ascii"))
            fh.write(table.rows.astype("<f4").tobytes())


def load_features(path, modality: str, expected_rows=None) -> FeatureTable:
    """Read an MMF1 binary or CSV feature file."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic == b"MMF1 ":
            header = bytearray()
            while True:
                c = fh.read(1)
                if not c:
                    raise FormatError(f"{path}: truncated header")
                if c == b"\n":
                    break
                header += c
            try:
                n, d = (int(tok) for tok in header.split())
            except ValueError as exc:
                raise FormatError(f"{path}: bad MMF1 header") from exc
            payload = fh.read()
            if len(payload) != 4 * n * d:
                raise FormatError(
                    f"{path}: header says {n}x{d} but payload holds "
                    f"{len(payload) // 4} floats"
                )
            rows = np.frombuffer(payload, dtype="<f4").reshape(n, d)
        else:
            rows = _load_features_csv(path)
    if expected_rows is not None and rows.shape[0] != expected_rows:
        raise FormatError(f"{path}: {rows.shape[0]} rows, dataset has {expected_rows} items")
    if not np.all(np.isfinite(rows)):
        raise FormatError(f"{path}: non-finite values")
    return FeatureTable(modality, rows)


def _load_features_csv(path) -> np.ndarray:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "item_index":
            raise FormatError(f"{path}: not an MMF1 or feature CSV file")
        d = len(header) - 1
        rows = []
        for rec in reader:
            if len(rec) != d + 1:
                raise FormatError(f"{path}: row width mismatch")
            if int(rec[0]) != len(rows):
                raise FormatError(f"{path}: item_index not contiguous")
            rows.append([np.float32(x) for x in rec[1:]])
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    return np.asarray(rows, dtype=np.float32)


# ---------------------------------------------------------------------------
# Split directory I/O


def save_split(split: SplitDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"num_users": split.num_users, "num_items": split.num_items}
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    for name, part in (("train", split.train), ("val", split.val), ("test", split.test)):
        with open(out / f"{name}.tsv", "w", encoding="utf-8") as fh:
            for u, i in part.edges.tolist():
                fh.write(f"{u}\t{i}\n")


def load_split(in_dir) -> SplitDataset:
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    m, n = meta["num_users"], meta["num_items"]

    def read_part(name):
        pairs = []
        for line in (src / f"{name}.tsv").read_text().splitlines():
            if line:
                u, i = line.split("\t")
                pairs.append((int(u), int(i)))
        return InteractionSet.from_pairs(m, n, pairs)

    return SplitDataset.create(read_part("train"), read_part("val"), read_part("test"))


# ---------------------------------------------------------------------------
# Synthetic planted-correspondence benchmark


@dataclass(frozen=True)
class SynthSpec:
    num_users: int = 800
    num_items: int = 500
    d_lat: int = 16
    edges_per_user: int = 20
    feature_noise_std: float = 0.1
    modality_dims: tuple = (("v", 64), ("t", 32))
    ratios: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if min(self.num_users, self.num_items, self.d_lat, self.edges_per_user) <= 0:
            raise ValueError("all counts must be positive")
        if self.edges_per_user > self.num_items:
            raise ValueError("edges_per_user exceeds num_items")


def synth_generate(spec: SynthSpec, seed: int):
    """Generate (split, feature tables, truth) for the synthetic benchmark.

    Item positives per user are drawn without replacement proportional to the
    softmax of user-item latent dot products (Gumbel top-k).  Clean features
    are a fixed random linear image of the item latents plus Gaussian noise.
    """
    m, n, d = spec.num_users, spec.num_items, spec.d_lat
    user_lat = substream(seed, "synth.user_latent").normal(m * d).reshape(m, d)
    item_lat = substream(seed, "synth.item_latent").normal(n * d).reshape(n, d)

    gumbel_stream = substream(seed, "synth.edges")
    u = gumbel_stream.uniform(m * n).reshape(m, n)
    gumbel = -np.log(-np.log(np.maximum(u, 1e-300)))
    keys = user_lat @ item_lat.T + gumbel
    # top edges_per_user per user; stable order keeps ties deterministic
    order = np.argsort(-keys, axis=1, kind="stable")[:, :spec.edges_per_user]
    pairs = [(u_idx, int(i)) for u_idx in range(m) for i in order[u_idx]]
    inter = InteractionSet.from_pairs(m, n, pairs)

    tables, clean, true_rows = {}, {}, {}
    for modality, dim in spec.modality_dims:
        fmap = substream(seed, f"synth.feature_map.{modality}")
        lin = fmap.normal(d * dim).reshape(d, dim) / np.sqrt(d)
        feats = item_lat @ lin
        if spec.feature_noise_std > 0:
            noise = substream(seed, f"synth.feature_noise.{modality}")
            feats = feats + spec.feature_noise_std * noise.normal(n * dim).reshape(n, dim)
        feats32 = feats.astype(np.float32)
        tables[modality] = FeatureTable(modality, feats32.copy())
        clean[modality] = FeatureTable(modality, feats32.copy())
        true_rows[modality] = np.arange(n, dtype=np.int64)

    split = split_dataset(inter, spec.ratios, derive_seed(seed, "synth.split"))
    truth = SynthTruth(item_lat, clean, true_rows)
    return split, tables, truth
