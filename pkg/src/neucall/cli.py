"""Batch command-line front end.

Commands: extract, train, eval, predict, ablate, gen-synthetic. Every command
honors --seed for bitwise-reproducible outputs. Exit codes: 0 success,
1 data/runtime failure, 2 usage/config error.

A config file (--config) holds ``key=value`` lines ('#' comments allowed)
where keys are long option names with '-' or '_'; command-line flags override
config values, which override built-in defaults. NEUCALL_THREADS caps
per-binary extraction parallelism.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import errors
from .acfg import SETTINGS, Acfg, FeatureConfig, deserialize_acfg, serialize_acfg
from .dataset import load_labels, load_split, save_labels, save_split, split_projects
from .errors import NeucallError
from .evaluate import (CfiReport, CfiRow, compute_aict, compute_metrics,
                       emit_pr_curve, run_ablation)
from .features import Vocabulary
from .ingest import export_program_ir, import_program_ir, load_elf
from .model import Hyperparams, init_params, load_checkpoint, save_checkpoint
from .pipeline import (Corpus, LoadedProgram, RawCorpus, TrainConfig,
                       extract_program, make_raw_corpus, predict_targets,
                       read_sidecar, train_model, write_sidecar)
from .x86 import FixtureDecoder

log = logging.getLogger("neucall")

EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2

_FLAG_NAMES = ("reverse_edges", "data_nodes", "ref_data_edges", "ref_code_edges",
               "function_nodes", "call_edges", "position_encoding")


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise errors.SchemaError(lineno, f"expected key=value, got {stripped!r}")
        key, value = stripped.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(parser: argparse.ArgumentParser, args: list[str]) -> list[str]:
    """Pre-scan for --config and fold file values in as parser defaults."""
    if "--config" not in args:
        return args
    idx = args.index("--config")
    if idx + 1 >= len(args):
        parser.error("--config needs a path")
    values = _read_config_file(args[idx + 1])

    sub_action = next(a for a in parser._actions
                      if isinstance(a, argparse._SubParsersAction))
    targets = [parser]
    for tok in args:
        if tok in sub_action.choices:
            targets.append(sub_action.choices[tok])
            break
    by_dest: dict[str, tuple[argparse.ArgumentParser, argparse.Action]] = {}
    for target in targets:
        for action in target._actions:
            by_dest.setdefault(action.dest, (target, action))

    for key, raw in values.items():
        if key not in by_dest:
            parser.error(f"unknown config key {key!r}")
        target, action = by_dest[key]
        if action.type is not None:
            value = action.type(raw)
        elif isinstance(action.const, bool) or isinstance(action.default, bool):
            value = raw.lower() in ("1", "true", "yes", "on")
        else:
            value = raw
        target.set_defaults(**{key: value})
    return args


def _feature_config(args) -> FeatureConfig:
    if getattr(args, "setting", None) is not None:
        if not 1 <= args.setting <= 10:
            raise errors.ConfigViolation(f"setting {args.setting} outside [1,10]")
        return SETTINGS[args.setting]
    if getattr(args, "features", None):
        chosen = {f.strip() for f in args.features.split(",") if f.strip()}
        unknown = chosen - set(_FLAG_NAMES)
        if unknown:
            raise errors.ConfigViolation(f"unknown feature flags: {sorted(unknown)}")
        config = FeatureConfig(**{name: name in chosen for name in _FLAG_NAMES})
        config.validate()
        return config
    return SETTINGS[10]


def _hyper(args) -> Hyperparams:
    return Hyperparams(lr=args.lr, hidden=args.hidden, depth=args.depth,
                       dropout=args.dropout, embed_dim=args.embed_dim,
                       pe_dim=args.pe_dim, max_insns=args.max_insns)


def _add_hyper_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--hidden", type=int, default=512)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--pe-dim", type=int, default=8)
    p.add_argument("--max-insns", type=int, default=70)


def _thread_cap() -> int:
    raw = os.environ.get("NEUCALL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _load_ir(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"\x7fELF":
        return load_elf(path, FixtureDecoder(), project_id=path.stem)
    return import_program_ir(path)


def _ir_inputs(input_path: Path) -> list[Path]:
    if input_path.is_dir():
        found = sorted(input_path.glob("*.ir.jsonl"))
        if not found:
            raise errors.SchemaError(0, f"no *.ir.jsonl files under {input_path}")
        return found
    return [input_path]


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".ir.jsonl", ".jsonl", ".json", ".acfg", ".elf"):
        if name.endswith(suffix):
            return name[:-len(suffix)]
    return path.stem


# --- commands -------------------------------------------------------------------

def cmd_extract(args) -> int:
    config = _feature_config(args)
    hyper = _hyper(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = _ir_inputs(Path(args.input))

    def one(path: Path) -> tuple[str, LoadedProgram]:
        ir = _load_ir(path)
        prog = extract_program(ir, config, hyper, key=_stem(path))
        serialize_acfg(prog.graph, out_dir / f"{prog.key}.acfg")
        write_sidecar(prog, out_dir / f"{prog.key}.feat.json")
        return prog.key, prog

    workers = _thread_cap()
    if workers > 1 and len(inputs) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, inputs))
    else:
        results = [one(p) for p in inputs]

    totals: dict[str, int] = {}
    node_totals = {"code": 0, "data": 0, "function": 0}
    for _, prog in results:
        g = prog.graph
        node_totals["code"] += g.n_code
        node_totals["data"] += g.n_data
        node_totals["function"] += g.n_function
        for rel, edges in g.relation_edges.items():
            totals[rel] = totals.get(rel, 0) + len(edges)
    print(f"extracted {len(results)} program(s) -> {out_dir}")
    print(f"{'kind':<12} {'name':<12} {'count':>9}")
    for name, count in node_totals.items():
        print(f"{'node':<12} {name:<12} {count:>9}")
    for rel in sorted(totals):
        print(f"{'edge':<12} {rel:<12} {totals[rel]:>9}")
    return EXIT_OK


def _load_corpus_dir(corpus_dir: Path, labels_dir: Path | None) -> list[LoadedProgram]:
    programs = []
    acfgs = sorted(corpus_dir.glob("*.acfg"))
    if not acfgs:
        raise errors.SchemaError(0, f"no *.acfg files under {corpus_dir}")
    for acfg_path in acfgs:
        stem = _stem(acfg_path)
        graph = deserialize_acfg(acfg_path)
        labels = None
        if labels_dir is not None:
            label_path = labels_dir / f"{stem}.labels.json"
            if label_path.exists():
                labels = load_labels(label_path)
        programs.append(read_sidecar(corpus_dir / f"{stem}.feat.json", graph, stem, labels))
    return programs


def _check_corpus_config(programs: list[LoadedProgram], config: FeatureConfig) -> None:
    for prog in programs:
        if prog.graph.config != config:
            raise errors.ConfigViolation(
                f"{prog.key} was extracted under a different feature configuration")


def cmd_train(args) -> int:
    programs = _load_corpus_dir(Path(args.corpus), Path(args.labels))
    labeled = [p for p in programs if p.labels is not None]
    if not labeled:
        raise errors.SchemaError(0, "no program in the corpus has a labels file")
    config = labeled[0].graph.config
    _check_corpus_config(labeled, config)

    if args.split:
        split = load_split(args.split)
    else:
        counts = [(p.project_id, sum(len(t) for t in p.labels.pairs.values()))
                  for p in labeled]
        split = split_projects(sorted(counts), seed=args.split_seed)
        if args.save_split:
            save_split(split, args.save_split)

    hyper = _hyper(args)
    tc = TrainConfig(epochs=args.epochs, hyper=hyper, threshold=args.threshold)
    result = train_model(Corpus(labeled, split), config, tc, args.seed)
    save_checkpoint(result.params, args.out)
    if args.log:
        rows = ["epoch,loss,val_f1"]
        rows += [f"{e},{loss!r},{f1!r}" for e, loss, f1 in result.log_rows]
        Path(args.log).write_text("\n".join(rows) + "\n")
    best_val = max((f1 for _, _, f1 in result.log_rows if not np.isnan(f1)), default=float("nan"))
    print(f"trained {args.epochs} epochs on {len(split.assignment)} projects; "
          f"best val F1 {best_val:.4f}; checkpoint -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    programs = _load_corpus_dir(Path(args.corpus), Path(args.labels))
    labeled = [p for p in programs if p.labels is not None]
    _check_corpus_config(labeled, params.config)
    split = load_split(args.split) if args.split else None
    if split is not None:
        labeled = [p for p in labeled
                   if split.assignment.get(p.project_id) == args.split_name]
    if not labeled:
        raise errors.SchemaError(0, "no labeled programs selected for evaluation")

    from .pipeline import score_programs
    feats = {p.key: p.features(params.vocab, params.hyper.embed_dim) for p in labeled}
    scored = score_programs(labeled, params, feats, args.eval_seed)
    if not scored:
        raise errors.SchemaError(0, "no resolvable labeled pairs to score")
    metrics = compute_metrics(scored, args.threshold)

    per_binary = []
    for prog in sorted(labeled, key=lambda p: p.key):
        s = score_programs([prog], params, feats, args.eval_seed)
        if s:
            per_binary.append(compute_metrics(s, args.threshold).f1)
    payload = metrics.to_dict()
    payload["per_binary_mean_f1"] = float(np.mean(per_binary)) if per_binary else float("nan")
    payload["n_pairs"] = len(scored)

    if args.aict:
        report = CfiReport()
        aict_all = []
        for prog in sorted(labeled, key=lambda p: p.key):
            _, target_sets = predict_targets(prog, params, feats[prog.key], args.threshold)
            aict = compute_aict(target_sets) if target_sets else 0.0
            aict_all.append(aict)
            report.rows.append(CfiRow(prog.key, prog.n_functions,
                                      len(prog.icall_block_by_addr),
                                      prog.n_address_taken, aict))
        payload["aict"] = report.to_dict()

    Path(args.metrics_out).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    if args.pr_out:
        emit_pr_curve(scored, args.pr_out)
    print(f"pairs {len(scored)}  precision {metrics.precision:.4f}  recall {metrics.recall:.4f}  "
          f"F1 {metrics.f1:.4f}  AUROC {metrics.auroc:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    params = load_checkpoint(args.checkpoint)
    programs = _load_corpus_dir(Path(args.corpus), None)
    _check_corpus_config(programs, params.config)
    out: dict[str, dict] = {}
    for prog in sorted(programs, key=lambda p: p.key):
        feats = prog.features(params.vocab, params.hyper.embed_dim)
        ranked, _ = predict_targets(prog, params, feats, args.threshold)
        out[prog.key] = {
            f"0x{icall:x}": [{"target": f"0x{addr:x}", "p": p} for addr, p in cands]
            for icall, cands in ranked.items()
        }
    Path(args.out).write_text(json.dumps(out, sort_keys=True, indent=1) + "\n")
    n_icalls = sum(len(v) for v in out.values())
    print(f"predicted targets for {n_icalls} icall site(s) -> {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    ir_dir = Path(args.ir_dir)
    pairs = []
    for path in _ir_inputs(ir_dir):
        stem = _stem(path)
        label_path = ir_dir / f"{stem}.labels.json"
        if not label_path.exists():
            raise errors.SchemaError(0, f"missing labels for {stem}")
        pairs.append((_load_ir(path), load_labels(label_path)))
    settings = [int(s) for s in args.settings.split(",") if s.strip()]
    for s in settings:
        if not 1 <= s <= 10:
            raise errors.ConfigViolation(f"setting {s} outside [1,10]")

    raw = make_raw_corpus(pairs, split_seed=args.split_seed)
    tc = TrainConfig(epochs=args.epochs, hyper=_hyper(args), threshold=args.threshold)
    report = run_ablation(raw, settings, tc, args.seed)
    Path(args.out).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    print(report.to_table())
    return EXIT_OK if not report.errors else EXIT_DATA


def cmd_gen_synthetic(args) -> int:
    from .synthetic import generate_synthetic_corpus
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = generate_synthetic_corpus(args.n, args.seed, control_mode=args.control)
    counts = []
    for ir, labels in pairs:
        export_program_ir(ir, out_dir / f"{ir.project_id}.ir.jsonl")
        save_labels(labels, out_dir / f"{ir.project_id}.labels.json")
        counts.append((labels.project_id, sum(len(t) for t in labels.pairs.values())))
    split = split_projects(sorted(counts), seed=args.split_seed)
    save_split(split, out_dir / "split.json")
    total_pairs = sum(c for _, c in counts)
    print(f"wrote {len(pairs)} programs ({total_pairs} labeled pairs) -> {out_dir}")
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neucall",
        description="Indirect-call target resolution via cross-reference augmented CFGs")
    parser.add_argument("--config", help="key=value config file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="build ACFG + feature sidecar from ELF/IR input")
    p.add_argument("--input", required=True, help="ELF file, IR JSONL file, or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--setting", type=int, default=None, help="ablation setting 1..10")
    p.add_argument("--features", default=None, help="comma list of feature flags")
    _add_hyper_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train on an extracted corpus")
    p.add_argument("--corpus", required=True, help="directory with *.acfg + *.feat.json")
    p.add_argument("--labels", required=True, help="directory with *.labels.json")
    p.add_argument("--split", default=None, help="split manifest JSON")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--save-split", default=None)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--threshold", type=float, default=0.5)
    _add_hyper_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="training-log CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an extracted corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--split-name", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--eval-seed", type=int, default=9999)
    p.add_argument("--metrics-out", required=True)
    p.add_argument("--pr-out", default=None)
    p.add_argument("--aict", action="store_true", help="emit the CFI-granularity report")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="rank candidate targets per icall site")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train one model per feature setting")
    p.add_argument("--ir-dir", required=True, help="directory with *.ir.jsonl + *.labels.json")
    p.add_argument("--settings", default="1,10")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--split-seed", type=int, default=0)
    _add_hyper_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-synthetic", help="generate the synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--control", action="store_true",
                   help="omit the planted pointer pattern (no xref signal)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, args)
        ns = parser.parse_args(args)
    except errors.SchemaError as exc:
        print(f"error: config file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return ns.func(ns)
    except errors.ConfigViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NeucallError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
