"""End-to-end orchestration: extraction, training, evaluation, prediction.

A ``LoadedProgram`` is one program ready for the model: its ACFG, static node
features, textual token streams (vocabulary ids are resolved at training time
so the vocabulary can be fitted on the training split only), and the address
maps needed to resolve label files.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acfg import Acfg, FeatureConfig, build_acfg, deserialize_acfg, homogenize, serialize_acfg
from .cfg import build_cfg, recover_functions, split_basic_blocks
from .dataset import (LabelSet, SplitAssignment, sample_balanced_resolved,
                      split_projects)
from .errors import SchemaError
from .evaluate import Metrics, compute_metrics
from .features import (GraphFeatures, TokenSeq, Vocabulary, laplacian_pe,
                       normalize_address, token_stream, xref_values_by_insn)
from .ingest import ProgramIR
from .model import (Hyperparams, ModelParams, ProgramBatch, init_params,
                    predict_pairs, rgcn_forward, save_checkpoint, train_epoch)
from .symbolize import XRefKind, partition_data, scan_xrefs

log = logging.getLogger(__name__)

SIDECAR_VERSION = 1


@dataclass
class LoadedProgram:
    key: str
    project_id: str
    build_tag: str
    graph: Acfg
    pe_dim: int
    code_static: np.ndarray
    data_static: np.ndarray
    function_static: np.ndarray
    token_streams: list[list[str]]
    block_addresses: list[int]
    icall_block_by_addr: dict[int, int]   # icall insn address -> block id
    entry_block_by_addr: dict[int, int]   # function entry address -> entry block id
    n_functions: int
    n_address_taken: int
    labels: LabelSet | None = None

    def features(self, vocab: Vocabulary, embed_dim: int) -> GraphFeatures:
        seqs = [TokenSeq(tuple(vocab.lookup(t) for t in stream))
                for stream in self.token_streams]
        return GraphFeatures(
            pe_dim=self.pe_dim, embed_dim=embed_dim,
            code_static=self.code_static, data_static=self.data_static,
            function_static=self.function_static,
            token_seqs=seqs, block_addresses=self.block_addresses)


def extract_program(ir: ProgramIR, config: FeatureConfig, hyper: Hyperparams,
                    key: str = "", labels: LabelSet | None = None) -> LoadedProgram:
    """Run blocks -> CFG -> functions -> xrefs -> ACFG -> PE for one program."""
    blocks = split_basic_blocks(ir)
    edges = build_cfg(blocks, ir)
    functions = recover_functions(blocks, edges, ir)
    xrefs = scan_xrefs(ir)
    data_nodes = partition_data(ir, xrefs) if config.data_nodes else []
    graph = build_acfg(blocks, edges, functions, data_nodes, xrefs, config)

    pe = None
    if config.position_encoding:
        pe = laplacian_pe(homogenize(graph), hyper.pe_dim)
    pe_dim = hyper.pe_dim if config.position_encoding else 0

    def pe_row(node_id: int) -> list[float]:
        return list(pe[node_id]) if pe is not None else []

    entry_addr_of_block: dict[int, int] = {}
    for fn in functions:
        for b in fn.blocks:
            entry_addr_of_block[b] = fn.entry_address

    xv = xref_values_by_insn(xrefs)
    code_rows, streams, addrs = [], [], []
    for b in blocks:
        fn_addr = entry_addr_of_block.get(b.id, b.start_address)
        code_rows.append(pe_row(graph.code_node(b.id)) +
                         [normalize_address(b.start_address, ir),
                          normalize_address(fn_addr, ir)])
        streams.append(token_stream(b, xv, hyper.max_insns))
        addrs.append(b.start_address)
    data_rows = [pe_row(graph.data_node(d.id)) + [normalize_address(d.address, ir)]
                 for d in data_nodes[:graph.n_data]]
    fn_rows = [pe_row(graph.function_node(fid)) + [normalize_address(fn.entry_address, ir)]
               for fid, fn in enumerate(functions[:graph.n_function])]

    entry_by_addr = {fn.entry_address: fn.entry_block for fn in functions}
    d2c_targets = {r.to_address for r in xrefs if r.kind is XRefKind.D2C}
    at_count = sum(1 for fn in functions if fn.entry_address in d2c_targets)

    def stack(rows: list[list[float]], width: int) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) if rows
                else np.zeros((0, width), dtype=np.float64))

    return LoadedProgram(
        key=key or ir.project_id, project_id=ir.project_id, build_tag=ir.build_tag,
        graph=graph, pe_dim=pe_dim,
        code_static=stack(code_rows, pe_dim + 2),
        data_static=stack(data_rows, pe_dim + 1),
        function_static=stack(fn_rows, pe_dim + 1),
        token_streams=streams, block_addresses=addrs,
        icall_block_by_addr={blocks[b].terminator.address: b for b in graph.icall_sites},
        entry_block_by_addr=entry_by_addr,
        n_functions=len(functions), n_address_taken=at_count,
        labels=labels,
    )


# --- sidecar persistence (CLI extract/train hand-off) ---------------------------

def write_sidecar(prog: LoadedProgram, path: str | Path) -> None:
    payload = {
        "version": SIDECAR_VERSION,
        "project_id": prog.project_id, "build_tag": prog.build_tag,
        "pe_dim": prog.pe_dim,
        "code_static": [list(map(float, row)) for row in prog.code_static],
        "data_static": [list(map(float, row)) for row in prog.data_static],
        "function_static": [list(map(float, row)) for row in prog.function_static],
        "token_streams": prog.token_streams,
        "block_addresses": [f"0x{a:x}" for a in prog.block_addresses],
        "icall_insns": {f"0x{a:x}": b for a, b in sorted(prog.icall_block_by_addr.items())},
        "entry_blocks": {f"0x{a:x}": b for a, b in sorted(prog.entry_block_by_addr.items())},
        "n_functions": prog.n_functions,
        "n_address_taken": prog.n_address_taken,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def read_sidecar(path: str | Path, graph: Acfg, key: str,
                 labels: LabelSet | None = None) -> LoadedProgram:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(exc.lineno, f"invalid sidecar JSON: {exc.msg}") from None
    if obj.get("version") != SIDECAR_VERSION:
        raise SchemaError(0, f"unsupported sidecar version {obj.get('version')!r}")
    pe_dim = int(obj["pe_dim"])

    def arr(kind: str, width: int) -> np.ndarray:
        rows = obj[kind]
        return (np.asarray(rows, dtype=np.float64) if rows
                else np.zeros((0, width), dtype=np.float64))

    return LoadedProgram(
        key=key, project_id=obj["project_id"], build_tag=obj["build_tag"],
        graph=graph, pe_dim=pe_dim,
        code_static=arr("code_static", pe_dim + 2),
        data_static=arr("data_static", pe_dim + 1),
        function_static=arr("function_static", pe_dim + 1),
        token_streams=[list(map(str, s)) for s in obj["token_streams"]],
        block_addresses=[int(a, 16) for a in obj["block_addresses"]],
        icall_block_by_addr={int(a, 16): int(b) for a, b in obj["icall_insns"].items()},
        entry_block_by_addr={int(a, 16): int(b) for a, b in obj["entry_blocks"].items()},
        n_functions=int(obj["n_functions"]),
        n_address_taken=int(obj["n_address_taken"]),
        labels=labels,
    )


# --- corpus containers -----------------------------------------------------------

@dataclass
class RawCorpus:
    """Programs plus ground truth, before any config-dependent extraction."""
    pairs: list[tuple[ProgramIR, LabelSet]]
    split: SplitAssignment


@dataclass
class Corpus:
    programs: list[LoadedProgram]
    split: SplitAssignment

    def subset(self, name: str) -> list[LoadedProgram]:
        return [p for p in self.programs
                if self.split.assignment.get(p.project_id) == name]


def make_raw_corpus(pairs: list[tuple[ProgramIR, LabelSet]], split_seed: int,
                    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> RawCorpus:
    """Split projects by their labeled pair counts."""
    counts: dict[str, int] = {}
    for _, labels in pairs:
        counts[labels.project_id] = counts.get(labels.project_id, 0) + \
            sum(len(t) for t in labels.pairs.values())
    split = split_projects(sorted(counts.items()), ratios, split_seed)
    return RawCorpus(pairs, split)


def extract_corpus(raw: RawCorpus, config: FeatureConfig, hyper: Hyperparams) -> Corpus:
    programs = [extract_program(ir, config, hyper, key=ir.project_id, labels=labels)
                for ir, labels in raw.pairs]
    return Corpus(programs, raw.split)


def corpus_from_pairs(pairs: list[tuple[ProgramIR, LabelSet]], config: FeatureConfig,
                      hyper: Hyperparams, split_seed: int,
                      ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> Corpus:
    return extract_corpus(make_raw_corpus(pairs, split_seed, ratios), config, hyper)


# --- training --------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    hyper: Hyperparams = field(default_factory=Hyperparams)
    threshold: float = 0.5
    eval_seed: int = 9999  # frozen sampling for validation/test scoring


@dataclass
class TrainResult:
    params: ModelParams
    log_rows: list[tuple[int, float, float]]   # (epoch, train loss, val F1)
    test_metrics: Metrics | None
    test_scored: list[tuple[float, bool]]


def _program_pairs(prog: LoadedProgram, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    samples = sample_balanced_resolved(prog.labels, prog.icall_block_by_addr,
                                       prog.entry_block_by_addr, rng)
    if not samples:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=bool)
    pairs = np.array([[s.callsite_block, s.candidate_block] for s in samples], dtype=np.int64)
    labels = np.array([s.label for s in samples], dtype=bool)
    return pairs, labels


def score_programs(programs: list[LoadedProgram], params: ModelParams,
                   feats_cache: dict[str, GraphFeatures],
                   eval_seed: int) -> list[tuple[float, bool]]:
    """Frozen-sampling scores over a program list (deterministic)."""
    scored: list[tuple[float, bool]] = []
    for prog in sorted(programs, key=lambda p: p.key):
        rng = np.random.default_rng([eval_seed, _stable_key(prog.key)])
        pairs, labels = _program_pairs(prog, rng)
        if pairs.size == 0:
            continue
        h = rgcn_forward(prog.graph, feats_cache[prog.key], params, train_mode=False)
        probs = predict_pairs(h, pairs, params)
        scored.extend((float(p), bool(l)) for p, l in zip(probs, labels))
    return scored


def _stable_key(key: str) -> int:
    import zlib
    return zlib.crc32(key.encode("utf-8"))


def train_model(corpus: Corpus, config: FeatureConfig, tc: TrainConfig,
                seed: int) -> TrainResult:
    """Train on the corpus's train split, keep the best-validation-F1 params."""
    train_progs = sorted(corpus.subset("train"), key=lambda p: p.key)
    val_progs = corpus.subset("validation")
    test_progs = corpus.subset("test")
    if not train_progs:
        raise ValueError("corpus has no training programs")

    vocab = Vocabulary.fit([s for p in train_progs for s in p.token_streams])
    params = init_params(config, tc.hyper, vocab, seed)
    feats = {p.key: p.features(vocab, tc.hyper.embed_dim) for p in corpus.programs}

    best = params.copy()
    best_f1 = -1.0
    log_rows: list[tuple[int, float, float]] = []
    for epoch in range(tc.epochs):
        sample_rng = np.random.default_rng([seed, 1000 + epoch])
        batches = []
        for prog in train_progs:
            pairs, labels = _program_pairs(prog, sample_rng)
            batches.append(ProgramBatch(prog.key, prog.graph, feats[prog.key], pairs, labels))
        drop_rng = np.random.default_rng([seed, 2000 + epoch])
        stats = train_epoch(batches, params, drop_rng)

        val_f1 = float("nan")
        if val_progs:
            scored = score_programs(val_progs, params, feats, tc.eval_seed)
            if scored:
                val_f1 = compute_metrics(scored, tc.threshold).f1
        have_val = not np.isnan(val_f1)
        if (have_val and val_f1 > best_f1) or not val_progs:
            best_f1 = val_f1 if have_val else best_f1
            best = params.copy()
        log_rows.append((epoch, stats.mean_loss, val_f1))
        log.info("epoch %d: loss %.4f  val F1 %.4f", epoch, stats.mean_loss, val_f1)

    test_metrics = None
    test_scored: list[tuple[float, bool]] = []
    if test_progs:
        test_scored = score_programs(test_progs, best, feats, tc.eval_seed)
        if test_scored:
            test_metrics = compute_metrics(test_scored, tc.threshold)
    return TrainResult(best, log_rows, test_metrics, test_scored)


def train_and_evaluate(corpus: Corpus, config: FeatureConfig, train_config,
                       seed: int) -> TrainResult:
    """Ablation entry point; re-extracts nothing (corpus must match config)."""
    tc = train_config if isinstance(train_config, TrainConfig) else TrainConfig(**train_config)
    return train_model(corpus, config, tc, seed)


# --- prediction --------------------------------------------------------------------

def predict_targets(prog: LoadedProgram, params: ModelParams,
                    feats: GraphFeatures, threshold: float = 0.5):
    """Ranked candidate list per icall site plus the thresholded target sets."""
    entries = sorted(set(prog.entry_block_by_addr.values()))
    addr_of_entry = {b: a for a, b in prog.entry_block_by_addr.items()}
    h = rgcn_forward(prog.graph, feats, params, train_mode=False)
    ranked: dict[int, list[tuple[int, float]]] = {}
    target_sets: dict[int, set[int]] = {}
    for icall_addr, block_id in sorted(prog.icall_block_by_addr.items()):
        if not entries:
            ranked[icall_addr] = []
            target_sets[icall_addr] = set()
            continue
        pairs = np.array([[block_id, e] for e in entries], dtype=np.int64)
        probs = predict_pairs(h, pairs, params)
        order = sorted(range(len(entries)), key=lambda i: (-probs[i], entries[i]))
        ranked[icall_addr] = [(addr_of_entry[entries[i]], float(probs[i])) for i in order]
        target_sets[icall_addr] = {addr_of_entry[entries[i]]
                                   for i in range(len(entries)) if probs[i] >= threshold}
    return ranked, target_sets
