"""Shared fixtures: the running-example program, random graphs, an ELF builder."""
from __future__ import annotations

import struct

import numpy as np
import pytest

from neucall import x86
from neucall.acfg import Acfg, FeatureConfig, NodeType, relation_signature, reverse_name
from neucall.dataset import LabelSet
from neucall.features import GraphFeatures, TokenSeq, Vocabulary
from neucall.ingest import (Immediate, Instruction, ProgramIR, Section,
                            SectionKind, linear_sweep, validate_ir)
from neucall.model import Hyperparams, init_params

# --- the running-example program -------------------------------------------------
#
# One indirect-call function whose pointer is loaded from a .data slot, the
# setup function that populates that slot (and takes the callee's address),
# the callee, a distractor, and a main that direct-calls the icall function.

FIG4 = {
    "text_base": 0x401000,
    "data_base": 0x60e000,
    "slot": 0x60e010,
    "icall_fn": 0x401000,
    "guard_load": 0x401000,
    "je": 0x401008,
    "ptr_load": 0x40100e,
    "icall_insn": 0x401016,
    "icall_ret": 0x401018,
    "setup_fn": 0x401019,
    "setup_lea": 0x401019,
    "setup_store": 0x401021,
    "callee_fn": 0x40102a,
    "distractor_fn": 0x401032,
    "main_fn": 0x40103a,
    "main_ret": 0x40103f,
}


def build_fig4_ir() -> ProgramIR:
    a = FIG4
    text = bytearray()
    text += x86.mov_r64_abs("rax", a["slot"])                      # 0x401000
    text += x86.jcc_rel32("je", a["je"], a["icall_ret"])           # 0x401008
    text += x86.mov_r64_abs("rdx", a["slot"])                      # 0x40100e
    text += x86.call_r64("rdx")                                    # 0x401016
    text += x86.ret()                                              # 0x401018
    text += x86.lea_r64_abs("rax", a["callee_fn"])                 # 0x401019
    text += x86.mov_abs_r64(a["slot"], "rax")                      # 0x401021
    text += x86.ret()                                              # 0x401029
    text += x86.mov_r64_imm32("rax", 0x2A)                         # 0x40102a
    text += x86.ret()                                              # 0x401031
    text += x86.mov_r64_imm32("rax", 0x7)                          # 0x401032
    text += x86.ret()                                              # 0x401039
    text += x86.call_rel32(a["main_fn"], a["icall_fn"])            # 0x40103a
    text += x86.ret()                                              # 0x40103f
    assert len(text) == 0x40

    data = bytearray(0x40)
    data[0x10:0x18] = a["callee_fn"].to_bytes(8, "little")

    sections = (
        Section(".text", SectionKind.CODE, a["text_base"], len(text), bytes(text)),
        Section(".data", SectionKind.DATA, a["data_base"], len(data), bytes(data)),
    )
    instructions = tuple(linear_sweep(sections[0], x86.FixtureDecoder()))
    ir = ProgramIR(
        image_base=0x400000, image_limit=a["data_base"] + len(data),
        sections=sections, instructions=instructions,
        known_function_entries=frozenset(
            a[k] for k in ("icall_fn", "setup_fn", "callee_fn", "distractor_fn", "main_fn")),
        project_id="fig4", build_tag="O0",
    )
    validate_ir(ir)
    return ir


@pytest.fixture(scope="session")
def fig4_ir() -> ProgramIR:
    return build_fig4_ir()


@pytest.fixture(scope="session")
def fig4_labels() -> LabelSet:
    return LabelSet("fig4", "O0",
                    {FIG4["icall_insn"]: frozenset({FIG4["callee_fn"]})})


# --- direct IR construction helper ------------------------------------------------

def make_ir(insns: list[Instruction], *, data: bytes | None = None,
            data_base: int = 0x601000, text_base: int = 0x401000,
            entries: frozenset[int] = frozenset(), rodata: bytes | None = None,
            rodata_base: int = 0x501000) -> ProgramIR:
    """ProgramIR straight from instruction objects (no byte encoding)."""
    text_size = (max(i.end for i in insns) - text_base) if insns else 0x10
    sections = [Section(".text", SectionKind.CODE, text_base, text_size, None)]
    if rodata is not None:
        sections.append(Section(".rodata", SectionKind.READONLY_DATA,
                                rodata_base, len(rodata), rodata))
    if data is not None:
        sections.append(Section(".data", SectionKind.DATA, data_base, len(data), data))
    limit = max(s.virtual_address + s.size for s in sections)
    ir = ProgramIR(image_base=0x400000, image_limit=limit,
                   sections=tuple(sections), instructions=tuple(insns),
                   known_function_entries=entries, project_id="test", build_tag="O0")
    validate_ir(ir)
    return ir


def insn(address: int, length: int, mnemonic: str, tokens: tuple[str, ...] = (),
         imms: tuple[Immediate, ...] = ()) -> Instruction:
    return Instruction(address, length, mnemonic, tokens, imms)


# --- minimal ELF64 builder -----------------------------------------------------------

SHF_WRITE, SHF_ALLOC, SHF_EXECINSTR = 0x1, 0x2, 0x4


def build_elf(text: bytes, text_addr: int = 0x401000,
              data: bytes | None = None, data_addr: int = 0x601000,
              func_syms: dict[str, int] | None = None,
              e_machine: int = 62) -> bytes:
    """A minimal but well-formed ELF64 with .text, optional .data, and a symtab."""
    sections: list[tuple[str, int, int, int, bytes, int, int]] = []
    # (name, sh_type, sh_flags, sh_addr, payload, sh_link, sh_entsize)
    sections.append((".text", 1, SHF_ALLOC | SHF_EXECINSTR, text_addr, text, 0, 0))
    if data is not None:
        sections.append((".data", 1, SHF_ALLOC | SHF_WRITE, data_addr, data, 0, 0))

    func_syms = func_syms or {}
    strtab = bytearray(b"\x00")
    symtab = bytearray(struct.pack("<IBBHQQ", 0, 0, 0, 0, 0, 0))
    for name, value in func_syms.items():
        name_off = len(strtab)
        strtab += name.encode() + b"\x00"
        symtab += struct.pack("<IBBHQQ", name_off, 0x12, 0, 1, value, 0)  # GLOBAL FUNC
    strtab_index = len(sections) + 3  # null + payload sections + symtab, then strtab
    sections.append((".symtab", 2, 0, 0, bytes(symtab), strtab_index, 24))
    sections.append((".strtab", 3, 0, 0, bytes(strtab), 0, 0))

    shstrtab = bytearray(b"\x00")
    name_offs = []
    for name, *_ in sections:
        name_offs.append(len(shstrtab))
        shstrtab += name.encode() + b"\x00"
    shstr_name_off = len(shstrtab)
    shstrtab += b".shstrtab\x00"
    sections.append((".shstrtab", 3, 0, 0, bytes(shstrtab), 0, 0))
    name_offs.append(shstr_name_off)

    payload_off = 64
    offsets = []
    blob = bytearray()
    for _, _, _, _, payload, _, _ in sections:
        offsets.append(payload_off + len(blob))
        blob += payload
    shoff = payload_off + len(blob)

    n_sections = len(sections) + 1  # + null section
    ehdr = struct.pack(
        "<4sBBBBB7xHHIQQQIHHHHHH",
        b"\x7fELF", 2, 1, 1, 0, 0,   # class 64, LSB, version, sysv
        2, e_machine, 1,             # ET_EXEC, machine, version
        0, 0, shoff, 0,              # entry, phoff, shoff, flags
        64, 0, 0,                    # ehsize, phentsize, phnum
        64, n_sections, n_sections - 1)
    shdrs = bytearray(b"\x00" * 64)  # null section header
    for i, (name, sh_type, sh_flags, sh_addr, payload, sh_link, sh_entsize) in enumerate(sections):
        shdrs += struct.pack("<IIQQQQIIQQ", name_offs[i], sh_type, sh_flags, sh_addr,
                             offsets[i], len(payload), sh_link, 0, 1, sh_entsize)
    return ehdr + blob + shdrs


# --- random heterogeneous graphs + features for model tests ---------------------------

def random_hetero_graph(rng: np.random.Generator, config: FeatureConfig,
                        max_nodes: int = 10) -> Acfg:
    n_code = int(rng.integers(1, max(2, max_nodes - 3)))
    n_data = int(rng.integers(0, 3)) if config.data_nodes else 0
    n_function = int(rng.integers(0, 3)) if config.function_nodes else 0
    while n_code + n_data + n_function > max_nodes:
        n_code = max(1, n_code - 1)
    counts = {NodeType.CODE: n_code, NodeType.DATA: n_data, NodeType.FUNCTION: n_function}
    offset = {NodeType.CODE: 0, NodeType.DATA: n_code, NodeType.FUNCTION: n_code + n_data}

    relation_edges: dict[str, list[tuple[int, int]]] = {}
    for rel in config.relations():
        if rel.startswith("rev_"):
            continue
        src_t, dst_t = relation_signature(rel)
        if counts[src_t] == 0 or counts[dst_t] == 0:
            relation_edges[rel] = []
            continue
        n_edges = int(rng.integers(0, 2 * max(counts[src_t], counts[dst_t]) + 1))
        edges = {(offset[src_t] + int(rng.integers(counts[src_t])),
                  offset[dst_t] + int(rng.integers(counts[dst_t])))
                 for _ in range(n_edges)}
        relation_edges[rel] = sorted(edges)
    if config.reverse_edges:
        for rel in list(relation_edges):
            relation_edges[reverse_name(rel)] = sorted(
                (d, s) for s, d in relation_edges[rel])

    node_types = ([NodeType.CODE] * n_code + [NodeType.DATA] * n_data
                  + [NodeType.FUNCTION] * n_function)
    graph = Acfg(config=config, node_types=node_types,
                 payloads=list(range(n_code)) + list(range(n_data)) + list(range(n_function)),
                 relation_edges=relation_edges, icall_sites=[], function_entries={},
                 n_code=n_code, n_data=n_data, n_function=n_function)
    graph.validate()
    return graph


def random_graph_features(rng: np.random.Generator, graph: Acfg,
                          hyper: Hyperparams, vocab_size: int) -> GraphFeatures:
    pe_dim = hyper.pe_dim if graph.config.position_encoding else 0
    seqs = [TokenSeq(tuple(int(t) for t in
                           rng.integers(0, vocab_size, size=int(rng.integers(0, 6)))))
            for _ in range(graph.n_code)]
    return GraphFeatures(
        pe_dim=pe_dim, embed_dim=hyper.embed_dim,
        code_static=rng.uniform(-1, 1, (graph.n_code, pe_dim + 2)),
        data_static=rng.uniform(-1, 1, (graph.n_data, pe_dim + 1)),
        function_static=rng.uniform(-1, 1, (graph.n_function, pe_dim + 1)),
        token_seqs=seqs, block_addresses=list(range(graph.n_code)))


def tiny_vocab(size: int = 8) -> Vocabulary:
    return Vocabulary([f"t{i}" for i in range(size - 1)])


def tiny_params(config: FeatureConfig, seed: int = 0, dtype=np.float64,
                hidden: int = 4, embed_dim: int = 3, pe_dim: int = 2,
                depth: int = 2, vocab_size: int = 8, dropout: float = 0.0):
    hyper = Hyperparams(hidden=hidden, embed_dim=embed_dim, pe_dim=pe_dim,
                        depth=depth, dropout=dropout)
    return init_params(config, hyper, tiny_vocab(vocab_size), seed, dtype=dtype)
