"""Command-line entry point: ``hscmoe <command> [flags]``.

Every command validates its inputs before writing anything. Failures exit
nonzero with a one-line message on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np
import yaml

from .data import SynthSpec, generate_synthetic, load_dir, save_synthetic
from .estimator import DivergenceError, MoERanker
from .metrics import (
    GateVectorRecord,
    brand_concentration,
    feature_importance,
    feature_importance_by_category,
    fi_spread,
    gate_cluster_separation,
    read_gate_table,
    write_gate_table,
)
from .model import VARIANTS, ModelConfig
from .train import (
    TrainConfig,
    evaluate,
    load_experiment_config,
    run_comparison,
    sweep,
    sweep_table,
    train_model,
)

log = logging.getLogger("hscmoe")


class CommandError(Exception):
    """Validation failure reported to the user; exit status 2."""


# shared helpers ------------------------------------------------------------------

def _require_file(path, what):
    if path is None or not os.path.isfile(path):
        raise CommandError(f"{what} not found: {path}")
    return path


def _require_dir(path, what):
    if not os.path.isdir(path):
        raise CommandError(f"{what} not found: {path}")
    return path


def _writable_dir(path):
    parent = os.path.dirname(os.path.abspath(path)) or "."
    probe = path if os.path.isdir(path) else parent
    while not os.path.exists(probe):
        probe = os.path.dirname(probe)
    if not os.access(probe, os.W_OK):
        raise CommandError(f"output path not writable: {path}")
    return path


def _read_yaml(path):
    with open(_require_file(path, "file"), encoding="utf-8") as fh:
        return yaml.safe_load(fh) or {}


def _load_config(args):
    """Model section dict, TrainConfig and data source from ``--config`` plus flags."""
    if getattr(args, "config", None):
        model, train, data = load_experiment_config(_require_file(args.config, "config file"))
    else:
        model, train, data = {}, TrainConfig(), SynthSpec()
    overrides = {k: getattr(args, k) for k in ("lr", "epochs", "batch_size")
                 if getattr(args, k, None) is not None}
    if getattr(args, "seeds", None):
        overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    if overrides:
        train = replace(train, **overrides)
    if getattr(args, "data", None):
        data = {"dir": _require_dir(args.data, "data directory")}
    return dict(model), train, data


def _load_data(data):
    if isinstance(data, SynthSpec):
        return generate_synthetic(data)
    train, test, _ = load_dir(_require_dir(data["dir"], "data directory"))
    return train, test


def _model_config(model, train_ds, variant=None):
    fields = dict(model)
    if variant:
        fields["variant"] = variant
    fields["vocab_sizes"] = tuple(train_ds.vocab_sizes)
    fields["n_numeric"] = train_ds.numeric.shape[1]
    if "expert_widths" in fields:
        fields["expert_widths"] = tuple(fields["expert_widths"])
    cfg = ModelConfig(**fields)
    return cfg.for_variant(cfg.variant)


def _emit(text, out=None):
    print(text)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


# commands ------------------------------------------------------------------------

def cmd_gen_data(args):
    fields = _read_yaml(args.spec) if args.spec else {}
    if args.seed is not None:
        fields["seed"] = args.seed
    try:
        spec = SynthSpec(**fields)
    except TypeError as exc:
        raise CommandError(f"bad spec: {exc}") from None
    _writable_dir(args.out)
    train, test = save_synthetic(args.out, spec)
    print(f"wrote {len(train)} train and {len(test)} test rows "
          f"({train.n_sessions}+{test.n_sessions} sessions) to {args.out}")


def cmd_train(args):
    model, tcfg, data = _load_config(args)
    if args.variant and args.variant not in VARIANTS:
        raise CommandError(f"unknown variant {args.variant!r}")
    _writable_dir(args.out)
    train, test = _load_data(data)
    cfg = _model_config(model, train, args.variant)
    seed = tcfg.seeds[0] if args.seed is None else args.seed
    ranker, history = train_model(cfg, tcfg, train, seed)
    ranker.save(args.out)
    lines = ["step\tepoch\tce\thsc\tadv\ttotal\tval_auc"]
    for h in history:
        lines.append("\t".join(str(h.get(k, "NA")) for k in
                               ("step", "epoch", "ce", "hsc", "adv", "total", "val_auc")))
    if args.history:
        with open(args.history, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    print(f"saved {cfg.variant} checkpoint to {args.out} after {ranker.n_steps_} steps")
    if test is not None and len(test):
        print(evaluate(ranker, test).to_text())


def cmd_eval(args):
    _require_file(args.checkpoint, "checkpoint")
    _, _, data = _load_config(args)
    ranker = MoERanker.load(args.checkpoint)
    train, test = _load_data(data)
    ds = train if args.split == "train" else test
    if ds is None:
        raise CommandError(f"no {args.split} split available")
    _emit(evaluate(ranker, ds).to_text(), args.out)


def _write_results(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for name, text in (("summary.tsv", result.to_table()), ("cells.tsv", result.cells_table()),
                       ("buckets.tsv", result.bucket_table())):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def cmd_compare(args):
    model, tcfg, data = _load_config(args)
    variants = tuple(args.variants.split(",")) if args.variants else tcfg.variants
    bad = set(variants) - set(VARIANTS)
    if bad:
        raise CommandError(f"unknown variants: {sorted(bad)}")
    if args.out:
        _writable_dir(args.out)
    train, test = _load_data(data)
    cfg = _model_config(model, train)
    result = run_comparison(variants, train, test, tcfg.seeds, cfg, tcfg, n_jobs=args.n_jobs)
    print(result.to_table())
    if args.out:
        _write_results(result, args.out)
        print(f"results written to {args.out}")


def _parse_grid(text, axis):
    points = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [p.strip() for p in chunk.split(",")]
        if axis == "gate_input":
            points.append(parts[0])
        elif axis == "nkd":
            points.append(tuple(int(p) for p in parts))
        else:
            points.append(tuple(float(p) for p in parts))
    if not points:
        raise CommandError("sweep grid is empty")
    return points


def cmd_sweep(args):
    model, tcfg, data = _load_config(args)
    grid = _parse_grid(args.grid, args.axis)
    if args.out:
        _writable_dir(args.out)
    train, test = _load_data(data)
    cfg = _model_config(model, train, args.variant)
    cells = sweep(args.axis, grid, cfg, tcfg, train, test, n_jobs=args.n_jobs)
    _emit(sweep_table(cells), args.out)


def _group_map(path):
    if not path:
        return None
    raw = _read_yaml(path)
    if not isinstance(raw, dict):
        raise CommandError(f"group map must be a mapping of top-category to group: {path}")
    return {str(k): str(v) for k, v in raw.items()}


def gate_records(ranker, dataset, groups=None, kind="probs", tc_names=None):
    """One record per distinct sub-category, in id order."""
    X, _, g = dataset.to_xy()
    vecs, first = ranker.gate_vectors(X, g, kind)
    sc = dataset.sc[first]
    tc = dataset.tc[first]
    records = []
    for s in np.unique(sc):
        rows = np.flatnonzero(sc == s)
        vec = vecs[rows[0]] if ranker.config_.gate_input != "all" else vecs[rows].mean(axis=0)
        t = int(tc[rows[0]])
        name = tc_names.get(t, str(t)) if tc_names else str(t)
        group = None
        if groups is not None:
            group = groups.get(name, groups.get(str(t)))
        records.append(GateVectorRecord(int(s), t, group, vec))
    return records


def cmd_export_gates(args):
    _require_file(args.checkpoint, "checkpoint")
    groups = _group_map(args.group_map)
    _, _, data = _load_config(args)
    _writable_dir(args.out)
    ranker = MoERanker.load(args.checkpoint)
    train, test = _load_data(data)
    ds = train if args.split == "train" else test
    tc_names = None
    if isinstance(data, dict):
        _, _, enc = load_dir(data["dir"])
        tc_names = {i: name for name, i in enc.vocab_[enc.schema.tc].items()}
    records = gate_records(ranker, ds, groups, args.kind, tc_names)
    write_gate_table(args.out, records)
    print(f"wrote {len(records)} gate vectors to {args.out}")
    back = read_gate_table(args.out)
    labels = [r.group if r.group is not None else str(r.tc_id) for r in back]
    try:
        ratio = gate_cluster_separation(np.array([r.gate_vector for r in back]), labels)
        print(f"separation={ratio}")
    except ValueError as exc:
        print(f"separation=NA ({exc})")


def cmd_feature_importance(args):
    _, _, data = _load_config(args)
    train, test = _load_data(data)
    ds = train if args.split == "train" else test
    names = list(ds.numeric_names) or [f"f{j}" for j in range(ds.numeric.shape[1])]
    if args.feature:
        unknown = set(args.feature) - set(names)
        if unknown:
            raise CommandError(f"unknown features: {sorted(unknown)}")
        cols = [names.index(f) for f in args.feature]
    else:
        cols = list(range(len(names)))
    lines = ["feature\tfi\tacross_tc_std\twithin_tc_std\t" + "\t".join(
        f"tc{t}" for t in ds.tree.tc_ids if t)]
    for j in cols:
        fi = feature_importance(ds.numeric[:, j], ds.y, ds.session)
        by_tc = feature_importance_by_category(ds, j, "tc")
        across, within = fi_spread(ds, j)
        vals = [f"{by_tc[t]:.6f}" if t in by_tc else "NA" for t in ds.tree.tc_ids if t]
        lines.append("\t".join([names[j], f"{fi:.6f}" if fi is not None else "NA",
                                f"{across:.6f}", f"{within:.6f}", *vals]))
    if ds.sparse.shape[1] > args.brand_column:
        lines.append("")
        lines.append(f"category\t{ds.sparse_names[args.brand_column]}_count_80\tfraction")
        for cat, row in brand_concentration(ds, args.brand_column).items():
            lines.append(f"tc{cat}\t{row['count']}\t{row['fraction']:.4f}")
    _emit("\n".join(lines), args.out)


def _read_tsv(path):
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().rstrip("\n").split("\t")
        return [dict(zip(head, line.rstrip("\n").split("\t"))) for line in fh if line.strip()]


def cmd_report(args):
    d = _require_dir(args.results, "results directory")
    summary = _read_tsv(_require_file(os.path.join(d, "summary.tsv"), "summary table"))
    cells = _read_tsv(_require_file(os.path.join(d, "cells.tsv"), "cells table"))
    by_variant = {r["variant"]: r for r in summary}
    out = ["# Results", "", "variant | auc | auc@10 | ndcg | ndcg@10 | separation | seeds",
           "--- | --- | --- | --- | --- | --- | ---"]
    for v, r in by_variant.items():
        out.append(" | ".join([v] + [f"{r[m]} ± {r[m + '_std']}" for m in
                                     ("auc", "auc_at_10", "ndcg", "ndcg_at_10")]
                              + [r["separation"], r["n_seeds"]]))
    base = by_variant.get(args.baseline)
    if base and base["auc"] != "NA":
        out += ["", f"AUC gain over {args.baseline}:"]
        for v, r in by_variant.items():
            if v != args.baseline and r["auc"] != "NA":
                out.append(f"- {v}: {float(r['auc']) - float(base['auc']):+.6f}")
    failed = [c for c in cells if c["status"] != "ok"]
    if failed:
        out += ["", "Failed cells:"] + [f"- {c['variant']} seed {c['seed']}" for c in failed]
    buckets = os.path.join(d, "buckets.tsv")
    if os.path.isfile(buckets):
        rows = _read_tsv(buckets)
        out += ["", f"Mean per-bucket AUC gain over {args.baseline} (bucket 0 = smallest):"]
        gains = {}
        for r in rows:
            if r[f"gain_vs_{args.baseline}"] != "NA" and r["variant"] != args.baseline:
                gains.setdefault((r["variant"], int(r["bucket"])), []).append(
                    float(r[f"gain_vs_{args.baseline}"]))
        for (v, b), g in sorted(gains.items()):
            out.append(f"- {v} bucket {b}: {np.mean(g):+.6f} over {len(g)} seeds")
    _emit("\n".join(out), args.out)


# parser --------------------------------------------------------------------------

def _common(p, data=True):
    p.add_argument("--config", help="YAML experiment config with model/train/data sections")
    if data:
        p.add_argument("--data", help="record directory (train.jsonl, test.jsonl, schema.json)")


def _train_flags(p):
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int, help="sessions per batch")
    p.add_argument("--n-jobs", dest="n_jobs", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="hscmoe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--spec", help="YAML synthetic spec")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    _common(p)
    _train_flags(p)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--history", help="write the training history table here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train variants over seeds and tabulate")
    _common(p)
    _train_flags(p)
    p.add_argument("--variants", help="comma-separated variant names")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--out", help="directory for summary/cells/buckets tables")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="grid over N/K/D, lambdas or gate input")
    _common(p)
    _train_flags(p)
    p.add_argument("--axis", required=True, choices=("nkd", "lambda", "gate_input"))
    p.add_argument("--grid", required=True,
                   help="points separated by ';', values by ',' (e.g. '10,4,1;16,2,1')")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-gates", help="per-sub-category gate vectors")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--group-map", dest="group_map", help="YAML/JSON mapping top-category -> group")
    p.add_argument("--kind", choices=("probs", "full"), default="probs")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_gates)

    p = sub.add_parser("feature-importance", help="pairwise feature importance per category")
    _common(p)
    p.add_argument("--feature", action="append", help="numeric feature name (repeatable)")
    p.add_argument("--brand-column", dest="brand_column", type=int, default=2)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--out")
    p.set_defaults(func=cmd_feature_importance)

    p = sub.add_parser("report", help="summarize a compare output directory")
    p.add_argument("--results", required=True)
    p.add_argument("--baseline", default="DNN")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (CommandError, FileNotFoundError, ValueError) as exc:
        print(f"hscmoe {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"hscmoe {args.command}: training diverged: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
