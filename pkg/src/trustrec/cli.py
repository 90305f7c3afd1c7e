"""trustrec command-line interface.

Subcommands: ingest, split, synth, corrupt-features, corrupt-edges, rectify,
edit-edges, train, evaluate, sweep, report.  Exit codes: 0 ok, 2 config
error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import backbone, corruptor, edge_editor, harness, rectifier
from .corpus import (FormatError, IngestError, InteractionSet, SynthSpec,
                     ingest_interactions, load_features, load_split,
                     save_features, save_split, split_dataset, synth_generate)
from .evaluator import evaluate


def _parse_ratios(text):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("ratios must be train,val,test")
    return tuple(parts)


def _load_edges_dir(path):
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    pairs = []
    for line in (path / "edges.tsv").read_text().splitlines():
        if line:
            u, i = line.split("\t")
            pairs.append((int(u), int(i)))
    return InteractionSet.from_pairs(meta["num_users"], meta["num_items"], pairs)


def cmd_ingest(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.raw_file).stem
    inter = ingest_interactions(args.raw_file, args.min_core, sidecar_prefix=out / stem)
    with open(out / "edges.tsv", "w", encoding="utf-8") as fh:
        for u, i in inter.edges.tolist():
            fh.write(f"{u}\t{i}\n")
    meta = {"num_users": inter.num_users, "num_items": inter.num_items,
            "num_edges": inter.num_edges}
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    print(f"ingested: M={inter.num_users} N={inter.num_items} edges={inter.num_edges}")


def cmd_split(args):
    inter = _load_edges_dir(args.dataset_dir)
    split = split_dataset(inter, args.ratios, args.seed)
    save_split(split, args.out_dir)
    print(f"split: train={split.train.num_edges} val={split.val.num_edges} "
          f"test={split.test.num_edges}")


def cmd_synth(args):
    dims = []
    for part in args.dims.split(","):
        name, dim = part.split("=")
        dims.append((name, int(dim)))
    spec = SynthSpec(num_users=args.num_users, num_items=args.num_items,
                     d_lat=args.d_lat, edges_per_user=args.edges_per_user,
                     feature_noise_std=args.noise, modality_dims=tuple(dims))
    split, feats, truth = synth_generate(spec, args.seed)
    out = Path(args.out_dir)
    save_split(split, out / "split")
    for m, table in feats.items():
        save_features(table, out / f"{m}.mmf")
        save_features(truth.clean_features[m], out / f"{m}.clean.mmf")
    print(f"synth: M={split.num_users} N={split.num_items} "
          f"train={split.train.num_edges}")


def cmd_corrupt_features(args):
    table = load_features(args.in_file, args.modality)
    corrupted, record = corruptor.permute_modality(table, args.eta, args.seed)
    save_features(corrupted, args.out_file)
    record.save_tsv(str(args.out_file) + ".perm.tsv")
    print(f"permuted {record.subset.size} of {table.num_items} rows")


def cmd_corrupt_edges(args):
    split = load_split(args.split_dir)
    corrupted = corruptor.corrupt_edges(split.train, args.eta, args.seed)
    new_split = split.with_train(corrupted)
    save_split(new_split, args.out_dir)
    corruptor.save_edge_audit(split.train, corrupted, Path(args.out_dir) / "edge_audit.tsv")
    print(f"edges: {split.train.num_edges} -> {corrupted.num_edges}")


def cmd_rectify(args):
    model = backbone.load_model(args.anchors_ckpt)
    _, avg_item = model.averaged()
    anchors = rectifier.anchors_from_item_embeddings(avg_item)
    config = rectifier.RectifyConfig(
        keep_ratio=args.rho, top_k=args.topk, tau=args.tau, lam=getattr(args, "lambda"),
        sinkhorn_iters=args.sinkhorn_iters, use_sinkhorn=not args.no_sinkhorn,
        use_small_loss=not args.no_small_loss, seed=args.seed)
    feats = {"v": load_features(args.in_v, "v", expected_rows=anchors.num_items),
             "t": load_features(args.in_t, "t", expected_rows=anchors.num_items)}
    result = rectifier.rectify_pipeline(None, feats, config, anchors=anchors)
    save_features(result.tables["v"], args.out_v)
    save_features(result.tables["t"], args.out_t)
    prov_path = Path(args.out_v).with_suffix(".provenance.json")
    prov_path.write_text(json.dumps(result.provenance, sort_keys=True, indent=2) + "\n")
    print(f"rectified; provenance at {prov_path}")


def cmd_edit_edges(args):
    split = load_split(args.split_dir)
    prior = backbone.load_model(args.prior_ckpt)
    holdout = split.val.edge_set | split.test.edge_set
    target = {"train": "train_only", "graph": "graph_only", "both": "both"}[args.target]
    if args.op == "prune":
        plan = edge_editor.prune_edges(split.train, prior, args.r, target=target)
    else:
        plan = edge_editor.complete_edges(split.train, prior, args.r,
                                          args.k_user, args.k_item, holdout,
                                          target=target)
    edge_editor.save_plan(plan, prior, args.out_plan)
    print(f"plan: -{plan.removals.shape[0]} +{plan.additions.shape[0]} target={target}")


def cmd_train(args):
    config = json.loads(Path(args.config).read_text())
    bundle = harness.run_experiment(config, out_dir=args.out_dir,
                                    save_model=args.save_model)
    print(json.dumps(bundle["metrics"], sort_keys=True, indent=2))


def cmd_evaluate(args):
    split = load_split(args.split_dir)
    feats = {}
    if args.features:
        for part in args.features.split(","):
            name, path = part.split("=")
            feats[name] = load_features(path, name, expected_rows=split.num_items)
    item_graph = None
    model_probe = backbone.load_model(args.checkpoint)
    if model_probe.kind == "modality_knn":
        item_graph = backbone.build_item_knn_graph(feats, args.knn_k)
    model = backbone.load_model(args.checkpoint, features=feats or None,
                                item_graph=item_graph, knn_k=args.knn_k)
    if model.needs_propagation() and model._avg is None:
        backbone.propagate(backbone.build_norm_adjacency(split.train), model)
    report = evaluate(model, split, ks=tuple(args.ks), policy=args.policy)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


def cmd_sweep(args):
    config = json.loads(Path(args.config).read_text())
    values = [float(v) for v in args.values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    rows, _ = harness.sweep(config, args.axis, values, seeds, out_dir=args.out_dir)
    print(f"sweep: {len(rows)} summary rows -> {Path(args.out_dir) / 'sweep.csv'}")


def cmd_report(args):
    rows = harness.report(args.bundles, out_csv=args.out)
    where = args.out if args.out else "stdout"
    if not args.out:
        for row in rows:
            print(row)
    print(f"report: {len(rows)} rows -> {where}", file=sys.stderr)


def build_parser():
    parser = argparse.ArgumentParser(prog="trustrec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="core and index a raw interaction file")
    p.add_argument("raw_file")
    p.add_argument("out_dir")
    p.add_argument("--min-core", type=int, default=5)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("split", help="80/10/10 per-user split")
    p.add_argument("dataset_dir")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", type=_parse_ratios, default=(0.8, 0.1, 0.1))
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    p.add_argument("out_dir")
    p.add_argument("--num-users", type=int, default=800)
    p.add_argument("--num-items", type=int, default=500)
    p.add_argument("--d-lat", type=int, default=16)
    p.add_argument("--edges-per-user", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--dims", default="v=64,t=32")
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("corrupt-features", help="permute feature rows within a subset")
    p.add_argument("in_file")
    p.add_argument("out_file")
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--modality", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_corrupt_features)

    p = sub.add_parser("corrupt-edges", help="add or delete train edges")
    p.add_argument("split_dir")
    p.add_argument("out_dir")
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_corrupt_edges)

    p = sub.add_parser("rectify", help="modality-level rectification")
    p.add_argument("anchors_ckpt")
    p.add_argument("in_v")
    p.add_argument("in_t")
    p.add_argument("out_v")
    p.add_argument("out_t")
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--topk", type=int, default=20)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--lambda", type=float, default=0.5, dest="lambda")
    p.add_argument("--sinkhorn-iters", type=int, default=50)
    p.add_argument("--no-sinkhorn", action="store_true")
    p.add_argument("--no-small-loss", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_rectify)

    p = sub.add_parser("edit-edges", help="similarity-based prune/complete plan")
    p.add_argument("prior_ckpt")
    p.add_argument("split_dir")
    p.add_argument("out_plan")
    p.add_argument("--op", choices=("prune", "complete"), required=True)
    p.add_argument("--r", type=float, default=0.05)
    p.add_argument("--target", choices=("train", "graph", "both"), default="train")
    p.add_argument("--k-user", type=int, default=10)
    p.add_argument("--k-item", type=int, default=10)
    p.set_defaults(fn=cmd_edit_edges)

    p = sub.add_parser("train", help="run one experiment config")
    p.add_argument("config")
    p.add_argument("out_dir")
    p.add_argument("--save-model", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("split_dir")
    p.add_argument("--ks", type=lambda s: [int(k) for k in s.split(",")],
                   default=[10, 20])
    p.add_argument("--policy", choices=("original_positives", "current_positives"),
                   default="original_positives")
    p.add_argument("--features", default=None, help="v=path,t=path")
    p.add_argument("--knn-k", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="stress sweep over one axis")
    p.add_argument("out_dir")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=sorted(harness.AXES))
    p.add_argument("--values", required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="aggregate bundles to long-format CSV")
    p.add_argument("bundles", nargs="+")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except (harness.ConfigError, ValueError, argparse.ArgumentTypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except harness.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (IngestError, FormatError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
