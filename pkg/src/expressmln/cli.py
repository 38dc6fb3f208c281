"""Command-line entry point.

Commands: ``train``, ``eval``, ``infer``, ``gen-kinship``, ``diag-colors``
and ``sweep``. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import CheckpointError, NonFiniteError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, apply_values, load_config_file, resolve_seed
from .gnn import PosteriorModel
from .graph import build_augmented_graph, build_graph, color_refine
from .kb import DataError, DatasetSplit, Semantics, load_dataset, save_dataset
from .kinship import KINSHIP_RULES, KinshipGenConfig, generate_kinship
from .logic import RuleError
from .meanfield import TrainConfig, TrainingError, infer_marginals, train, write_history
from .metrics import auc_pr, completion_tasks, filtered_rank, metrics_report, mrr_hits
from .sampler import SamplerConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("expressmln")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kb", required=True, help="dataset directory")
    p.add_argument("--rules", help="rule file (default: <kb>/rules.txt)")
    p.add_argument("--config", help="TOML config file; flags override it")
    p.add_argument("--semantics", choices=("open", "closed"))
    p.add_argument("--seed", type=int)
    g = p.add_argument_group("model")
    g.add_argument("--model", dest="model.variant", choices=("naive", "tunable", "gnn", "express"))
    g.add_argument("--gnn-dim", dest="model.gnn_dim", type=int)
    g.add_argument("--tune-dim", dest="model.tune_dim", type=int)
    g.add_argument("--rounds", dest="model.rounds", type=int)
    g = p.add_argument_group("sampler")
    g.add_argument("--p-obs", dest="sampler.p_obs", type=float)
    g.add_argument("--batch", dest="sampler.batch", type=int)
    g.add_argument("--query-anchored", dest="sampler.query_anchored", action="store_const", const=True)
    g = p.add_argument_group("training")
    g.add_argument("--epochs", dest="train.epochs", type=int)
    g.add_argument("--steps", dest="train.steps_per_epoch", type=int)
    g.add_argument("--lr", dest="train.lr", type=float)
    g.add_argument("--disc-weight", dest="train.disc_weight", type=float)
    g.add_argument("--entropy-weight", dest="train.entropy_weight", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expressmln", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a posterior model")
    _add_run_options(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out queries")
    p.add_argument("--kb", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", help="query TSV (default: <kb>/test.tsv)")
    p.add_argument("--mode", choices=("deduction", "completion"), default="deduction")
    p.add_argument("--curve", help="write the PR curve points to this CSV file")

    p = sub.add_parser("infer", help="print marginals for query atoms")
    p.add_argument("--kb", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", help="query TSV (default: <kb>/test.tsv)")

    p = sub.add_parser("gen-kinship", help="write a synthetic kinship dataset")
    p.add_argument("--n", type=int, default=62)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("diag-colors", help="report color-refinement classes")
    p.add_argument("--kb", required=True)
    p.add_argument("--augmented", action="store_true", help="refine the graph with all groundings")
    p.add_argument("--edges", help="dump the graph edge list to this file")

    p = sub.add_parser("sweep", help="train and evaluate a grid of model variants")
    _add_run_options(p)
    p.add_argument("--variants", default="gnn,express")
    p.add_argument("--gnn-dims", default="64")
    p.add_argument("--tune-dims", default="4")
    p.add_argument("--seeds", default="0")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        apply_values(cfg, load_config_file(args.config))
    overrides: dict = {}
    for key, value in vars(args).items():
        if "." in key and value is not None:
            section, name = key.split(".", 1)
            overrides.setdefault(section, {})[name] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "semantics", None):
        overrides["semantics"] = args.semantics
    return apply_values(cfg, overrides).validate()


def _load(kb_dir, rules=None, semantics="open"):
    d = Path(kb_dir)
    if not d.is_dir():
        raise DataError(f"dataset directory {d} does not exist")
    if rules is not None and not Path(rules).is_file():
        raise ConfigError(f"rules file {rules} does not exist")
    return load_dataset(d, Semantics(semantics), rules_path=rules)


def _model_from(kb, cfg: RunConfig, seed: int) -> PosteriorModel:
    m = cfg.model
    return PosteriorModel(kb, m.variant, gnn_dim=m.gnn_dim, tune_dim=m.tune_dim, rounds=m.rounds,
                          seed=seed, share_rounds=m.share_rounds)


def _train_config(cfg: RunConfig, seed: int, completion: bool) -> TrainConfig:
    t = cfg.train
    disc = t.disc_weight if t.disc_weight is not None else (1.0 if completion else 0.0)
    return TrainConfig(epochs=t.epochs, steps_per_epoch=t.steps_per_epoch, lr=t.lr,
                       formula_weight=t.formula_weight, entropy_weight=t.entropy_weight,
                       disc_weight=disc, patience=t.patience, seed=seed)


def _sampler_config(cfg: RunConfig) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(p_obs=s.p_obs, batch=s.batch, query_anchored=s.query_anchored,
                         allow_repeated=s.allow_repeated)


def _fit(kb, split: DatasetSplit, cfg: RunConfig, seed: int):
    if not kb.clauses:
        raise DataError("no rules loaded; pass --rules or add rules.txt to the dataset")
    model = _model_from(kb, cfg, seed)
    completion = cfg.sampler.query_anchored
    sampler = _sampler_config(cfg)
    tc = _train_config(cfg, seed, completion)
    if completion:
        from .kbc import train_completion
        result = train_completion(kb, [a for a, v in split.train if v == 1], model, sampler, tc)
    else:
        result = train(kb, kb.clauses, model, sampler, tc)
    return model, result


def _load_model(kb, checkpoint) -> PosteriorModel:
    if not Path(checkpoint).is_file():
        raise ConfigError(f"checkpoint {checkpoint} does not exist")
    tensors, meta = load_checkpoint(checkpoint)
    m = meta.get("model", {})
    try:
        model = PosteriorModel(kb, m.get("variant", "express"), gnn_dim=m.get("gnn_dim", 64),
                               tune_dim=m.get("tune_dim", 4), rounds=m.get("rounds", 2),
                               share_rounds=m.get("share_rounds", False))
        model.load_state_dict(tensors)
    except ValueError as exc:
        raise DataError(f"checkpoint does not match the knowledge base: {exc}") from None
    return model


def _queries(kb, kb_dir, path):
    from .kb import _parse_atom_lines, _read_text

    p = Path(path) if path else Path(kb_dir) / "test.tsv"
    if not p.is_file():
        raise DataError(f"query file {p} does not exist")
    by_name = {s.name: s for s in kb.schemas}
    rows = _parse_atom_lines(_read_text(p), p, by_name, dict(kb.constant_ids), grow=False)
    if not rows:
        raise DataError(f"query file {p} is empty")
    return rows


def _deduction_metrics(kb, model, rows, curve_path=None) -> dict:
    atoms = [a for a, _ in rows]
    labels = np.array([v for _, v in rows])
    probs = np.array([infer_marginals(kb, model, atoms)[a] for a in atoms])
    pooled = auc_pr(labels, probs)
    per_pred = {}
    for p in sorted({a.predicate for a in atoms}):
        sel = np.array([a.predicate == p for a in atoms])
        if 0 < labels[sel].sum() < sel.sum():
            per_pred[kb.schemas[p].name] = auc_pr(labels[sel], probs[sel])
    if curve_path:
        from .metrics import pr_curve
        Path(curve_path).write_text(pr_curve(labels, probs).to_csv(), encoding="utf-8")
    avg = float(np.mean(list(per_pred.values()))) if per_pred else None
    return {"auc": pooled, "auc_pr_avg": avg, "n_queries": len(atoms)}


def _completion_metrics(kb, split, model, rows) -> dict:
    known = {a for part in (split.facts, split.train, split.valid, split.test) for a, v in part if v == 1}
    queries = [a for a, v in rows if v == 1]
    if not queries:
        raise DataError("completion evaluation needs positive queries")
    tasks = completion_tasks(lambda atoms: model.logits(atoms).data, queries, kb.n_entities, known)
    mrr, hits = mrr_hits(filtered_rank(t) for t in tasks)
    return {"mrr": mrr, "hits10": hits, "n_queries": len(queries)}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = run_config(args)
    seed = resolve_seed(cfg)
    kb, split = _load(args.kb, args.rules, cfg.semantics)
    out = Path(args.out)
    model, result = _fit(kb, split, cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"model": model.config(), "constants": len(kb.constants),
            "schemas": [[s.name, s.arity] for s in kb.schemas]}
    save_checkpoint(out / "checkpoint.bin", model.state_dict(), meta)
    write_history(out / "history.csv", result.history)
    resolved = cfg.to_dict()
    resolved["seed"] = seed
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({"checkpoint": str(out / "checkpoint.bin"), "epochs": len(result.history)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    kb, split = _load(args.kb)
    model = _load_model(kb, args.checkpoint)
    rows = _queries(kb, args.kb, args.queries)
    if args.mode == "completion":
        report = _completion_metrics(kb, split, model, rows)
    else:
        report = _deduction_metrics(kb, model, rows, args.curve)
    print(metrics_report(**report))
    return EXIT_OK


def cmd_infer(args) -> int:
    kb, _ = _load(args.kb)
    model = _load_model(kb, args.checkpoint)
    rows = _queries(kb, args.kb, args.queries)
    marg = infer_marginals(kb, model, [a for a, _ in rows])
    for atom, q in marg.items():
        print(f"{kb.format_atom(atom)}\t{q!r}")
    return EXIT_OK


def cmd_gen_kinship(args) -> int:
    seed = args.seed if args.seed is not None else resolve_seed(RunConfig())
    try:
        gen = KinshipGenConfig(n_entities=args.n, seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    kb, split = generate_kinship(gen)
    save_dataset(args.out, kb, split, rules_text=KINSHIP_RULES)
    print(json.dumps({"out": args.out, "facts": len(kb.facts), "queries": len(split.test)}))
    return EXIT_OK


def cmd_diag_colors(args) -> int:
    kb, split = _load(args.kb)
    graph = build_augmented_graph(kb) if args.augmented else build_graph(kb)
    coloring = color_refine(graph)
    print(f"rounds: {coloring.rounds}")
    for cls in coloring.constant_classes():
        print("class: " + " ".join(kb.constants[c] for c in cls))
    # query atoms whose argument tuples share colors look identical to a GNN
    queries = sorted({a for part in (split.train, split.valid, split.test) for a, _ in part})
    col = coloring.constant_colors
    groups: dict = {}
    for a in queries:
        groups.setdefault((a.predicate, tuple(int(col[c]) for c in a.args)), []).append(a)
    for members in groups.values():
        if len(members) > 1:
            print("indistinguishable: " + " ".join(kb.format_atom(a) for a in members))
    if args.edges:
        from .graph import write_edge_list
        with open(args.edges, "w", encoding="utf-8") as fh:
            write_edge_list(graph, kb, fh)
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = run_config(args)
    kb, split = _load(args.kb, args.rules, base.semantics)
    try:
        variants = args.variants.split(",")
        gnn_dims = [int(x) for x in args.gnn_dims.split(",")]
        tune_dims = [int(x) for x in args.tune_dims.split(",")]
        seeds = [int(x) for x in args.seeds.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad sweep grid: {exc}") from None
    rows = [(a, v) for a, v in split.test]
    if not rows:
        raise DataError("sweep needs test queries in the dataset")
    for variant, d, dt, seed in itertools.product(variants, gnn_dims, tune_dims, seeds):
        cfg = run_config(args)
        cfg.model.variant, cfg.model.gnn_dim, cfg.model.tune_dim = variant, d, dt
        cfg.validate()
        model, _ = _fit(kb, split, cfg, seed)
        if cfg.sampler.query_anchored:
            report = _completion_metrics(kb, split, model, rows)
        else:
            report = _deduction_metrics(kb, model, rows)
        print(json.dumps({"variant": variant, "gnn_dim": d, "tune_dim": dt, "seed": seed,
                          "n_params": model.n_params(), **json.loads(metrics_report(**report))},
                         sort_keys=True), flush=True)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "gen-kinship": cmd_gen_kinship,
            "diag-colors": cmd_diag_colors, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, RuleError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, TrainingError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
