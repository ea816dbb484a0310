"""Desk-scale synthetic corpus with a planted cross-reference signal.

Each generated program is a real byte-level image for the fixture decoder:
functions packed into .text, function-pointer slots in .data, decoy strings
in .rodata. Every indirect callsite loads its target from a dedicated data
slot whose words statically hold the true callee entry addresses, so the
ground truth is discoverable through the c2d / d2c reference chain and
nowhere else. In control mode the pointer pattern is left out (loads become
plain constants, slots stay zero), severing that chain while keeping the
graph shapes comparable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import x86
from .dataset import LabelSet
from .ingest import ProgramIR, Section, SectionKind, linear_sweep, validate_ir

TEXT_BASE = 0x401000
RODATA_BASE = 0x500000
DATA_BASE = 0x600000
IMAGE_BASE = 0x400000

_BODY_REGS = ("rax", "rcx", "rbx", "rsi", "rdi")

# descriptor -> encoded size in bytes (all forms below are fixed-size)
_SIZES = {
    "mov_ri": 7, "mov_rr": 3, "push_r": 1, "nop": 1,
    "load_abs": 8, "store_abs": 8, "lea_abs": 8,
    "call_rel": 5, "call_reg": 2, "jcc": 6, "jmp": 5, "ret": 1,
}


def _body(rng: np.random.Generator, count: int) -> list[tuple]:
    out = []
    for _ in range(count):
        roll = rng.random()
        if roll < 0.5:
            out.append(("mov_ri", _BODY_REGS[rng.integers(len(_BODY_REGS))],
                        int(rng.integers(1, 256))))
        elif roll < 0.7:
            a, b = rng.choice(len(_BODY_REGS), size=2, replace=False)
            out.append(("mov_rr", _BODY_REGS[a], _BODY_REGS[b]))
        elif roll < 0.85:
            out.append(("push_r", _BODY_REGS[rng.integers(len(_BODY_REGS))]))
        else:
            out.append(("nop",))
    return out


@dataclass
class _Func:
    blocks: list[list[tuple]]  # descriptor lists; addresses assigned later


def _plain_function(rng: np.random.Generator, n_funcs: int) -> _Func:
    shape = rng.random()
    if shape < 0.45:
        return _Func([_body(rng, int(rng.integers(2, 6))) + [("ret",)]])
    if shape < 0.75:
        # entry w/ conditional, fallthrough middle, shared exit
        return _Func([
            _body(rng, int(rng.integers(1, 4))) + [("jcc", rng.integers(16), 2)],
            _body(rng, int(rng.integers(1, 4))),
            _body(rng, int(rng.integers(1, 3))) + [("ret",)],
        ])
    callee = int(rng.integers(n_funcs))
    return _Func([
        _body(rng, int(rng.integers(1, 3))) + [("call_rel", callee)],
        _body(rng, int(rng.integers(1, 3))) + [("ret",)],
    ])


def generate_program(index: int, seed: int, control_mode: bool = False
                     ) -> tuple[ProgramIR, LabelSet]:
    """One deterministic synthetic program plus its ground-truth labels."""
    rng = np.random.default_rng([seed, index])
    n_funcs = int(rng.integers(8, 15))
    n_icalls = int(rng.integers(1, 4))

    fids = list(rng.permutation(n_funcs))
    icall_fids = fids[:n_icalls]
    setup_fids = fids[n_icalls:2 * n_icalls]

    # one pointer-slot region per icall, then distractor slots; 16-byte spaced
    slot_addrs = [DATA_BASE + 0x10 + 16 * k for k in range(n_icalls)]
    n_distract = int(rng.integers(1, 4))
    distract_addrs = [DATA_BASE + 0x10 + 16 * (n_icalls + k) for k in range(n_distract)]
    data_size = 0x10 + 16 * (n_icalls + n_distract) + 16

    targets_per_icall: list[list[int]] = []
    for fid in icall_fids:
        n_t = 2 if rng.random() < 0.3 else 1
        pool = [f for f in range(n_funcs) if f != fid]
        targets_per_icall.append(sorted(int(t) for t in rng.choice(pool, size=n_t, replace=False)))

    rodata_strings = []
    cursor = 0
    for _ in range(2):
        s = bytes(int(rng.integers(0x41, 0x7A)) for _ in range(int(rng.integers(8, 17))))
        rodata_strings.append((RODATA_BASE + cursor, s))
        cursor += len(s) + 1
    rodata_size = cursor + 8

    funcs: list[_Func] = []
    icall_of_fid = {fid: k for k, fid in enumerate(icall_fids)}
    setup_of_fid = {fid: k for k, fid in enumerate(setup_fids)}
    for fid in range(n_funcs):
        if fid in icall_of_fid:
            k = icall_of_fid[fid]
            slot = slot_addrs[k]
            guard = []
            if rng.random() < 0.6:  # second reference to the same slot (guard read)
                guard = [("load_abs", "rax", slot)] if not control_mode else \
                    [("mov_ri", "rax", int(rng.integers(1, 256)))]
            load = ("load_abs", "rdx", slot) if not control_mode else \
                ("mov_ri", "rdx", int(rng.integers(1, 256)))
            funcs.append(_Func([
                _body(rng, int(rng.integers(1, 3))) + guard + [("jcc", rng.integers(16), 2)],
                [load, ("call_reg", "rdx")],
                _body(rng, int(rng.integers(1, 3))) + [("ret",)],
            ]))
        elif fid in setup_of_fid:
            k = setup_of_fid[fid]
            first_target = targets_per_icall[k][0]
            if control_mode:
                block = [("mov_ri", "rax", int(rng.integers(1, 256))),
                         ("store_abs", slot_addrs[k], "rax")]
            else:
                block = [("lea_fn", "rax", first_target),
                         ("store_abs", slot_addrs[k], "rax")]
            funcs.append(_Func([block + _body(rng, int(rng.integers(0, 3))) + [("ret",)]]))
        else:
            funcs.append(_plain_function(rng, n_funcs))

    # a main function that direct-calls a few others, and one rodata reference
    main_callees = sorted(int(c) for c in rng.choice(n_funcs, size=min(3, n_funcs), replace=False))
    str_addr = rodata_strings[int(rng.integers(len(rodata_strings)))][0]
    funcs.append(_Func([
        _body(rng, 2) + [("lea_abs", "rsi", str_addr), ("call_rel", main_callees[0])],
        [("call_rel", main_callees[1])],
        _body(rng, 1) + [("ret",)],
    ]))

    # pass 1: sizes -> addresses
    entry_addrs: list[int] = []
    block_addrs: list[list[int]] = []
    cursor = TEXT_BASE
    for fn in funcs:
        entry_addrs.append(cursor)
        addrs = []
        for block in fn.blocks:
            addrs.append(cursor)
            for desc in block:
                key = "lea_abs" if desc[0] == "lea_fn" else desc[0]
                cursor += _SIZES[key]
        block_addrs.append(addrs)
    text_size = cursor - TEXT_BASE

    # pass 2: encode with resolved addresses
    text = bytearray()
    icall_insn_addrs: dict[int, int] = {}  # icall index -> call instruction address
    addr = TEXT_BASE
    for fid, fn in enumerate(funcs):
        for bi, block in enumerate(fn.blocks):
            for desc in block:
                op = desc[0]
                if op == "mov_ri":
                    enc = x86.mov_r64_imm32(desc[1], desc[2])
                elif op == "mov_rr":
                    enc = x86.mov_r64_r64(desc[1], desc[2])
                elif op == "push_r":
                    enc = x86.push_r64(desc[1])
                elif op == "nop":
                    enc = x86.nop()
                elif op == "load_abs":
                    enc = x86.mov_r64_abs(desc[1], desc[2])
                elif op == "store_abs":
                    enc = x86.mov_abs_r64(desc[1], desc[2])
                elif op == "lea_abs":
                    enc = x86.lea_r64_abs(desc[1], desc[2])
                elif op == "lea_fn":
                    enc = x86.lea_r64_abs(desc[1], entry_addrs[desc[2]])
                elif op == "call_rel":
                    enc = x86.call_rel32(addr, entry_addrs[desc[1]])
                elif op == "call_reg":
                    if fid in icall_of_fid:
                        icall_insn_addrs[icall_of_fid[fid]] = addr
                    enc = x86.call_r64(desc[1])
                elif op == "jcc":
                    enc = x86.jcc_rel32(x86._CC_NAMES[desc[1]], addr, block_addrs[fid][desc[2]])
                elif op == "jmp":
                    enc = x86.jmp_rel32(addr, block_addrs[fid][desc[2]])
                elif op == "ret":
                    enc = x86.ret()
                else:
                    raise AssertionError(op)
                text += enc
                addr += len(enc)
    assert len(text) == text_size

    data = bytearray(data_size)
    if not control_mode:
        for k, targets in enumerate(targets_per_icall):
            for j, t in enumerate(targets):
                off = slot_addrs[k] - DATA_BASE + 8 * j
                data[off:off + 8] = int(entry_addrs[t]).to_bytes(8, "little")
    for k, daddr in enumerate(distract_addrs):
        off = daddr - DATA_BASE
        if rng.random() < 0.5:
            value = rodata_strings[int(rng.integers(len(rodata_strings)))][0]
        else:
            value = int(rng.integers(1, 0x4000))
        data[off:off + 8] = value.to_bytes(8, "little")

    rodata = bytearray(rodata_size)
    for base, s in rodata_strings:
        rodata[base - RODATA_BASE:base - RODATA_BASE + len(s)] = s

    sections = (
        Section(".text", SectionKind.CODE, TEXT_BASE, text_size, bytes(text)),
        Section(".rodata", SectionKind.READONLY_DATA, RODATA_BASE, rodata_size, bytes(rodata)),
        Section(".data", SectionKind.DATA, DATA_BASE, data_size, bytes(data)),
    )
    from .x86 import FixtureDecoder
    instructions = tuple(linear_sweep(sections[0], FixtureDecoder()))
    ir = ProgramIR(
        image_base=IMAGE_BASE, image_limit=DATA_BASE + data_size,
        sections=sections, instructions=instructions,
        known_function_entries=frozenset(entry_addrs),
        project_id=f"proj{index:03d}", build_tag="O0",
    )
    validate_ir(ir)

    labels = LabelSet(ir.project_id, ir.build_tag, {
        icall_insn_addrs[k]: frozenset(entry_addrs[t] for t in targets)
        for k, targets in enumerate(targets_per_icall)
    })
    return ir, labels


def generate_synthetic_corpus(n_programs: int, seed: int, control_mode: bool = False
                              ) -> list[tuple[ProgramIR, LabelSet]]:
    if n_programs < 1:
        raise ValueError("n_programs must be >= 1")
    return [generate_program(i, seed, control_mode) for i in range(n_programs)]
