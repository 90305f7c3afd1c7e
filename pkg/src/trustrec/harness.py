"""Configuration-driven experiment runner and stress-sweep engine.

A configuration is one flat JSON object with dotted keys; unknown keys are
errors.  ``run_experiment`` executes ingest/synth -> corrupt -> (rectify)
-> (edit) -> train -> evaluate and writes a deterministic bundle: identical
config plus seed yields byte-identical metrics output.  ``sweep`` runs the
cross-product of one axis against variants and seeds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import backbone, corruptor, edge_editor, rectifier
from .corpus import FeatureTable, SplitDataset, SynthSpec, load_features, load_split, synth_generate
from .evaluator import evaluate
from .rng import derive_seed


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class SchemaError(Exception):
    pass


MODALITIES = ("v", "t")

# key -> (default, type tag); tags: str/int/float/bool/list/opt_str/opt_float
KNOWN_KEYS = {
    "seed": (0, "int"),
    "dataset.source": ("synth", "str"),
    "dataset.split_dir": (None, "opt_str"),
    "dataset.features.v": (None, "opt_str"),
    "dataset.features.t": (None, "opt_str"),
    "dataset.synth.num_users": (800, "int"),
    "dataset.synth.num_items": (500, "int"),
    "dataset.synth.d_lat": (16, "int"),
    "dataset.synth.edges_per_user": (20, "int"),
    "dataset.synth.feature_noise_std": (0.1, "float"),
    "dataset.synth.dim.v": (64, "int"),
    "dataset.synth.dim.t": (32, "int"),
    "backbone.kind": ("lightgcn", "str"),
    "backbone.dim": (64, "int"),
    "backbone.layers": (2, "int"),
    "backbone.knn_k": (10, "int"),
    "train.learning_rate": (1e-3, "float"),
    "train.l2": (1e-4, "float"),
    "train.batch_size": (2048, "int"),
    "train.eval_batch_size": (4096, "int"),
    "train.max_epochs": (1000, "int"),
    "train.patience": (30, "int"),
    "corrupt.eta_m.v": (0.0, "float"),
    "corrupt.eta_m.t": (0.0, "float"),
    "corrupt.eta_e": (0.0, "float"),
    "mr.enabled": (False, "bool"),
    "mr.rho": (None, "opt_float"),
    "mr.rho_rule": ("keep_clean", "str"),
    "mr.top_k": (20, "int"),
    "mr.tau": (0.1, "float"),
    "mr.lambda": (0.5, "float"),
    "mr.sinkhorn_iters": (50, "int"),
    "mr.sinkhorn_eps": (1e-8, "float"),
    "mr.sinkhorn_tol": (1e-4, "float"),
    "mr.use_sinkhorn": (True, "bool"),
    "mr.use_small_loss": (True, "bool"),
    "mr.anchor_epochs": (150, "int"),
    "mr.proj_epochs": (200, "int"),
    "mr.proj_batch": (256, "int"),
    "mr.proj_lr": (1e-2, "float"),
    "edit.op": ("none", "str"),
    "edit.r": (0.05, "float"),
    "edit.target": ("train_only", "str"),
    "edit.k_user": (10, "int"),
    "edit.k_item": (10, "int"),
    "eval.ks": ([10, 20], "list"),
    "eval.policy": ("original_positives", "str"),
}

_CHOICES = {
    "dataset.source": ("synth", "files"),
    "backbone.kind": backbone.KINDS,
    "mr.rho_rule": ("keep_clean", "paper_literal"),
    "edit.op": ("none", "prune", "complete"),
    "edit.target": edge_editor.TARGETS,
    "eval.policy": ("original_positives", "current_positives"),
}


def resolve_config(user: dict) -> dict:
    """Fill defaults and validate; unknown keys and bad values are errors."""
    unknown = sorted(set(user) - set(KNOWN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, (default, tag) in KNOWN_KEYS.items():
        value = user.get(key, default)
        out[key] = _coerce(key, value, tag)
    for key, choices in _CHOICES.items():
        if out[key] not in choices:
            raise ConfigError(f"{key}={out[key]!r} not in {choices}")
    if out["dataset.source"] == "files" and not out["dataset.split_dir"]:
        raise ConfigError("dataset.source=files requires dataset.split_dir")
    if out["backbone.kind"] in ("vbpr", "modality_knn") and out["dataset.source"] == "files":
        if not (out["dataset.features.v"] or out["dataset.features.t"]):
            raise ConfigError(f"{out['backbone.kind']} requires feature tables")
    return out


def _coerce(key, value, tag):
    try:
        if tag == "int":
            if isinstance(value, bool) or int(value) != value:
                raise ValueError
            return int(value)
        if tag == "float":
            return float(value)
        if tag == "bool":
            if not isinstance(value, bool):
                raise ValueError
            return value
        if tag == "str":
            if not isinstance(value, str):
                raise ValueError
            return value
        if tag == "opt_str":
            if value is not None and not isinstance(value, str):
                raise ValueError
            return value
        if tag == "opt_float":
            return None if value is None else float(value)
        if tag == "list":
            return [int(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    raise ConfigError(f"unhandled tag {tag}")


def _edges_digest(inter) -> str:
    h = hashlib.sha256()
    h.update(np.asarray([inter.num_users, inter.num_items], dtype=np.int64).tobytes())
    h.update(inter.edges.tobytes())
    return h.hexdigest()


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load_dataset(cfg):
    if cfg["dataset.source"] == "synth":
        dims = tuple((m, cfg[f"dataset.synth.dim.{m}"]) for m in MODALITIES
                     if cfg[f"dataset.synth.dim.{m}"] > 0)
        spec = SynthSpec(
            num_users=cfg["dataset.synth.num_users"],
            num_items=cfg["dataset.synth.num_items"],
            d_lat=cfg["dataset.synth.d_lat"],
            edges_per_user=cfg["dataset.synth.edges_per_user"],
            feature_noise_std=cfg["dataset.synth.feature_noise_std"],
            modality_dims=dims,
        )
        return synth_generate(spec, cfg["seed"])
    split = load_split(cfg["dataset.split_dir"])
    feats = {}
    for m in MODALITIES:
        path = cfg[f"dataset.features.{m}"]
        if path:
            feats[m] = load_features(path, m, expected_rows=split.num_items)
    return split, feats, None


def _train_prior(split, cfg, cache):
    """LightGCN prior on the (possibly corrupted) train edges, cached by content."""
    seed = derive_seed(cfg["seed"], "edit.prior")
    key = ("prior", _edges_digest(split.train), _edges_digest(split.val),
           cfg["backbone.dim"], cfg["backbone.layers"], _train_tuple(cfg), seed)
    if cache is not None and key in cache:
        return cache[key]
    model = backbone.init_embeddings(split.num_users, split.num_items,
                                     cfg["backbone.dim"], seed,
                                     kind="lightgcn", num_layers=cfg["backbone.layers"])
    backbone.train(model, split, _train_config(cfg, seed))
    if cache is not None:
        cache[key] = model
    return model


def _train_tuple(cfg):
    return (cfg["train.learning_rate"], cfg["train.l2"], cfg["train.batch_size"],
            cfg["train.eval_batch_size"], cfg["train.max_epochs"], cfg["train.patience"])


def _train_config(cfg, seed):
    return backbone.TrainConfig(
        learning_rate=cfg["train.learning_rate"], l2=cfg["train.l2"],
        batch_size=cfg["train.batch_size"], eval_batch_size=cfg["train.eval_batch_size"],
        max_epochs=cfg["train.max_epochs"], patience=cfg["train.patience"], seed=seed)


def _compute_anchors(split, cfg, cache):
    seed = derive_seed(cfg["seed"], "rectifier.anchor")
    acfg = rectifier.AnchorConfig(dim=cfg["backbone.dim"], num_layers=cfg["backbone.layers"],
                                  epochs=cfg["mr.anchor_epochs"],
                                  learning_rate=cfg["train.learning_rate"],
                                  l2=cfg["train.l2"], batch_size=cfg["train.batch_size"],
                                  seed=seed)
    key = ("anchors", _edges_digest(split.train), acfg)
    if cache is not None and key in cache:
        return cache[key]
    anchors = rectifier.compute_anchors(split.train, acfg)
    if cache is not None:
        cache[key] = anchors
    return anchors


def run_experiment(config: dict, out_dir=None, cache: dict = None,
                   save_model: bool = False) -> dict:
    """Execute the full pipeline for one configuration; returns the bundle dict."""
    cfg = resolve_config(config)
    seed = cfg["seed"]
    provenance = {}

    def stage(name, fn):
        try:
            return fn()
        except (ConfigError, StageError):
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc

    split, feats, truth = stage("dataset", lambda: _load_dataset(cfg))
    provenance["dataset"] = {"num_users": split.num_users, "num_items": split.num_items,
                             "train_edges": split.train.num_edges,
                             "val_edges": split.val.num_edges,
                             "test_edges": split.test.num_edges}

    def corrupt():
        nonlocal split, feats, truth
        records = {}
        for m in sorted(feats):
            eta = cfg[f"corrupt.eta_m.{m}"]
            if eta > 0:
                feats[m], rec = corruptor.permute_modality(feats[m], eta, seed)
                records[m] = rec
                if truth is not None:
                    truth = truth.with_permutation(m, rec.subset, rec.source)
        eta_e = cfg["corrupt.eta_e"]
        before = split.train.num_edges
        if eta_e != 0.0:
            split = split.with_train(corruptor.corrupt_edges(split.train, eta_e, seed))
        provenance["corruption"] = {
            "eta_e": eta_e,
            "train_edges_before": before,
            "train_edges_after": split.train.num_edges,
            "permuted_items": {m: int(r.subset.size) for m, r in records.items()},
        }
        return records

    stage("corrupt", corrupt)

    if cfg["mr.enabled"] and feats:
        def run_mr():
            nonlocal feats
            anchors = _compute_anchors(split, cfg, cache)
            rcfg = rectifier.RectifyConfig(
                keep_ratio=cfg["mr.rho"],
                eta_m={m: cfg[f"corrupt.eta_m.{m}"] for m in feats},
                rho_rule=cfg["mr.rho_rule"], top_k=cfg["mr.top_k"], tau=cfg["mr.tau"],
                lam=cfg["mr.lambda"], sinkhorn_eps=cfg["mr.sinkhorn_eps"],
                sinkhorn_iters=cfg["mr.sinkhorn_iters"], sinkhorn_tol=cfg["mr.sinkhorn_tol"],
                use_sinkhorn=cfg["mr.use_sinkhorn"], use_small_loss=cfg["mr.use_small_loss"],
                projection=rectifier.ProjectionConfig(
                    epochs=cfg["mr.proj_epochs"], batch_size=cfg["mr.proj_batch"],
                    learning_rate=cfg["mr.proj_lr"]),
                seed=seed)
            result = rectifier.rectify_pipeline(split, feats, rcfg, anchors=anchors)
            feats = result.tables
            provenance["rectification"] = result.provenance
        stage("rectify", run_mr)

    supervision, propagation = split.train, split.train
    if cfg["edit.op"] != "none":
        def run_edit():
            nonlocal supervision, propagation
            prior = _train_prior(split, cfg, cache)
            holdout = split.val.edge_set | split.test.edge_set
            if cfg["edit.op"] == "prune":
                plan = edge_editor.prune_edges(split.train, prior, cfg["edit.r"],
                                               target=cfg["edit.target"])
            else:
                plan = edge_editor.complete_edges(split.train, prior, cfg["edit.r"],
                                                  cfg["edit.k_user"], cfg["edit.k_item"],
                                                  holdout, target=cfg["edit.target"])
            supervision, propagation = edge_editor.apply_edit(split, plan)
            provenance["edit"] = {"op": cfg["edit.op"], "target": cfg["edit.target"],
                                  "r": cfg["edit.r"],
                                  "removed": int(plan.removals.shape[0]),
                                  "added": int(plan.additions.shape[0])}
        stage("edit", run_edit)

    def run_train():
        kind = cfg["backbone.kind"]
        if kind in ("vbpr", "modality_knn") and not feats:
            raise ConfigError(f"{kind} requires feature tables")
        item_graph = None
        if kind == "modality_knn":
            item_graph = backbone.build_item_knn_graph(feats, cfg["backbone.knn_k"])
        model = backbone.init_embeddings(
            split.num_users, split.num_items, cfg["backbone.dim"], seed,
            kind=kind, num_layers=cfg["backbone.layers"],
            features=feats if kind != "lightgcn" else None,
            item_graph=item_graph, knn_k=cfg["backbone.knn_k"])
        result = backbone.train(model, split, _train_config(cfg, seed),
                                propagation_edges=propagation,
                                supervision_edges=supervision)
        provenance["training"] = {"epochs_run": len(result.history),
                                  "best_epoch": result.best_epoch}
        return result

    result = stage("train", run_train)

    def run_eval():
        return evaluate(result.model, split, ks=tuple(cfg["eval.ks"]),
                        policy=cfg["eval.policy"], supervision_edges=supervision,
                        batch_users=cfg["train.eval_batch_size"])

    report = stage("evaluate", run_eval)

    bundle = {"config": cfg, "metrics": report.to_dict(), "provenance": provenance}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(cfg, out / "resolved_config.json")
        _dump_json(bundle["metrics"], out / "metrics.json")
        _dump_json(provenance, out / "provenance.json")
        backbone.save_history_csv(result.history, out / "history.csv")
        if save_model:
            backbone.save_model(result.model, out / "model.ckpt")
    return bundle


# ---------------------------------------------------------------------------
# Sweeps

AXES = {
    "eta_m": ("corrupt.eta_m.v", "corrupt.eta_m.t"),
    "eta_e": ("corrupt.eta_e",),
    "lambda": ("mr.lambda",),
    "tau": ("mr.tau",),
    "rho": ("mr.rho",),
    "r": ("edit.r",),
}

_EDIT_VARIANTS = [
    ("add_train", {"edit.op": "complete", "edit.target": "train_only"}),
    ("add_graph", {"edit.op": "complete", "edit.target": "graph_only"}),
    ("add_both", {"edit.op": "complete", "edit.target": "both"}),
    ("prune_train", {"edit.op": "prune", "edit.target": "train_only"}),
    ("prune_graph", {"edit.op": "prune", "edit.target": "graph_only"}),
    ("prune_both", {"edit.op": "prune", "edit.target": "both"}),
]

VARIANTS_BY_AXIS = {
    "eta_m": [("base", {"mr.enabled": False}), ("rect", {"mr.enabled": True})],
    "eta_e": [("base", {"edit.op": "none"})] + _EDIT_VARIANTS,
    "lambda": [("rect", {"mr.enabled": True})],
    "tau": [("rect", {"mr.enabled": True})],
    "rho": [("rect", {"mr.enabled": True})],
    "r": [("base", {"edit.op": "none"})] + _EDIT_VARIANTS,
}


def _cell_config(config, axis, value, variant_overrides, seed):
    cell = dict(config)
    for key in AXES[axis]:
        cell[key] = value
    cell.update(variant_overrides)
    cell["seed"] = seed
    return cell


def _cell_dir(out_dir, axis, value, variant, seed):
    return Path(out_dir) / f"{axis}={value}" / variant / f"seed={seed}"


def _run_cell(args):
    cell_cfg, cell_dir, axis, value, variant, seed = args
    bundle = run_experiment(cell_cfg, out_dir=cell_dir)
    _dump_json({"axis": axis, "value": value, "variant": variant, "seed": seed},
               Path(cell_dir) / "cell.json")
    return bundle


def sweep(config: dict, axis: str, values, seeds=(1, 2, 3), out_dir=None):
    """Cross-product of axis values x variants x seeds; returns summary rows.

    Cell (value, seed) output is identical to ``run_experiment`` with the
    axis value substituted into the config.  TRUSTREC_THREADS > 1 runs cells
    in parallel processes (per-process caches only).
    """
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    base = resolve_config(config)
    if axis in ("lambda", "tau", "rho") and base["dataset.source"] == "synth" \
            and not any(base[f"dataset.synth.dim.{m}"] > 0 for m in MODALITIES):
        raise ConfigError(f"axis {axis} needs feature tables")

    variants = VARIANTS_BY_AXIS[axis]
    specs = []
    for value in values:
        for name, overrides in variants:
            for seed in seeds:
                cell_dir = (_cell_dir(out_dir, axis, value, name, seed)
                            if out_dir is not None else None)
                specs.append((_cell_config(config, axis, value, overrides, seed),
                              cell_dir, axis, value, name, seed))

    threads = int(os.environ.get("TRUSTREC_THREADS", "1"))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            bundles = list(pool.map(_run_cell, specs))
    else:
        cache = {}
        bundles = []
        for spec in specs:
            cell_cfg, cell_dir, *_ = spec
            bundle = run_experiment(cell_cfg, out_dir=cell_dir, cache=cache)
            if cell_dir is not None:
                _dump_json({"axis": spec[2], "value": spec[3],
                            "variant": spec[4], "seed": spec[5]},
                           Path(cell_dir) / "cell.json")
            bundles.append(bundle)

    rows = []
    idx = 0
    cells = {}
    for value in values:
        for name, _ in variants:
            for seed in seeds:
                cells[(value, name, seed)] = bundles[idx]
                idx += 1
    for value in values:
        for name, _ in variants:
            metric_values = {}
            for seed in seeds:
                flat = _flatten_metrics(cells[(value, name, seed)]["metrics"])
                for metric, score in flat.items():
                    metric_values.setdefault(metric, []).append(score)
            row = {"axis": axis, "value": value, "variant": name, "seeds": len(seeds)}
            for metric in sorted(metric_values):
                arr = np.asarray(metric_values[metric])
                row[f"{metric}_mean"] = float(arr.mean())
                row[f"{metric}_sd"] = float(arr.std(ddof=0))
            rows.append(row)

    if out_dir is not None:
        _write_csv(rows, Path(out_dir) / "sweep.csv")
    return rows, bundles


def _flatten_metrics(metrics: dict) -> dict:
    flat = {}
    for key, value in metrics.items():
        if isinstance(value, dict):
            flat[f"recall@{key}"] = value["recall"]
            flat[f"ndcg@{key}"] = value["ndcg"]
    return flat


def _write_csv(rows, path):
    if not rows:
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def report(bundle_dirs, out_csv=None):
    """Aggregate bundles into long-format rows (variant, axis, value, seed, metric, score)."""
    rows = []
    key_sets = {}
    parsed = []
    for bundle_dir in bundle_dirs:
        path = Path(bundle_dir)
        metrics = json.loads((path / "metrics.json").read_text())
        flat = _flatten_metrics(metrics)
        key_sets[str(path)] = frozenset(flat)
        cell_path = path / "cell.json"
        if cell_path.exists():
            cell = json.loads(cell_path.read_text())
        else:
            config = json.loads((path / "resolved_config.json").read_text())
            cell = {"axis": None, "value": None, "variant": "single",
                    "seed": config["seed"]}
        parsed.append((cell, flat))
    if key_sets:
        reference = next(iter(key_sets.values()))
        for name, keys in key_sets.items():
            if keys != reference:
                raise SchemaError(f"bundle {name} metric keys {sorted(keys)} "
                                  f"differ from {sorted(reference)}")
    for cell, flat in parsed:
        for metric in sorted(flat):
            rows.append({"variant": cell["variant"], "axis": cell["axis"],
                         "value": cell["value"], "seed": cell["seed"],
                         "metric": metric, "score": flat[metric]})
    if out_csv is not None:
        _write_csv(rows, out_csv)
    return rows
