"""Basic block recovery, control-flow edges, and function extents."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

from .ingest import Instruction, ProgramIR

log = logging.getLogger(__name__)

JCC_MNEMONICS = frozenset({
    "jo", "jno", "jb", "jae", "je", "jne", "jbe", "ja",
    "js", "jns", "jp", "jnp", "jl", "jge", "jle", "jg",
})


class TerminatorKind(str, enum.Enum):
    FALLTHROUGH = "fallthrough"
    JUMP = "jump"
    CONDITIONAL = "conditional"
    CALL = "call"
    INDIRECT_CALL = "indirect_call"
    INDIRECT_JUMP = "indirect_jump"
    RETURN = "return"
    HALT = "halt"


class EdgeKind(str, enum.Enum):
    TRANSFER = "transfer"
    CALL = "call"


@dataclass(frozen=True)
class BasicBlock:
    id: int
    start_address: int
    instructions: tuple[Instruction, ...]
    terminator_kind: TerminatorKind

    @property
    def end_address(self) -> int:
        return self.instructions[-1].end

    @property
    def terminator(self) -> Instruction:
        return self.instructions[-1]

    def contains(self, address: int) -> bool:
        return self.start_address <= address < self.end_address


@dataclass(frozen=True)
class FlowEdge:
    src: int
    dst: int
    kind: EdgeKind


@dataclass(frozen=True)
class FunctionExtent:
    entry_block: int
    blocks: frozenset[int]
    entry_address: int


def _is_hex_token(tok: str) -> bool:
    return tok.startswith("0x")


def direct_target(insn: Instruction) -> int | None:
    """Resolved target of a direct call/jmp/jcc, carried as a 0x operand token."""
    if insn.mnemonic in ("call", "jmp") or insn.mnemonic in JCC_MNEMONICS:
        if insn.operand_tokens and _is_hex_token(insn.operand_tokens[0]):
            return int(insn.operand_tokens[0], 16)
    return None


def terminator_kind(insn: Instruction) -> TerminatorKind:
    """Classify an instruction's control effect; FALLTHROUGH for non-transfers."""
    m = insn.mnemonic
    if m == "ret":
        return TerminatorKind.RETURN
    if m == "hlt":
        return TerminatorKind.HALT
    if m in JCC_MNEMONICS:
        return TerminatorKind.CONDITIONAL
    if m == "jmp":
        return TerminatorKind.JUMP if direct_target(insn) is not None else TerminatorKind.INDIRECT_JUMP
    if m == "call":
        return TerminatorKind.CALL if direct_target(insn) is not None else TerminatorKind.INDIRECT_CALL
    return TerminatorKind.FALLTHROUGH


def is_control_transfer(insn: Instruction) -> bool:
    return terminator_kind(insn) is not TerminatorKind.FALLTHROUGH


def split_basic_blocks(ir: ProgramIR) -> list[BasicBlock]:
    """Leader-rule block splitting over the linear instruction stream.

    Leaders: the first instruction, every direct branch target that is an
    instruction start, and every instruction following a control transfer.
    A gap in the address stream (section boundary, skipped decode bytes)
    also starts a new block.
    """
    insns = ir.instructions
    if not insns:
        return []
    starts = {i.address for i in insns}
    leaders = {insns[0].address}
    for prev, cur in zip(insns, insns[1:]):
        if is_control_transfer(prev) or prev.end != cur.address:
            leaders.add(cur.address)
    for insn in insns:
        tgt = direct_target(insn)
        if tgt is not None and tgt in starts:
            leaders.add(tgt)

    blocks: list[BasicBlock] = []
    current: list[Instruction] = []
    for insn in insns:
        if insn.address in leaders and current:
            blocks.append(_make_block(len(blocks), current))
            current = []
        current.append(insn)
    if current:
        blocks.append(_make_block(len(blocks), current))
    return blocks


def _make_block(block_id: int, insns: list[Instruction]) -> BasicBlock:
    return BasicBlock(block_id, insns[0].address, tuple(insns), terminator_kind(insns[-1]))


def build_cfg(blocks: list[BasicBlock], ir: ProgramIR) -> list[FlowEdge]:
    """Flow edges between blocks.

    Transfer edges cover fallthrough continuation (including past call-kind
    terminators, where execution resumes after the callee returns) and direct
    jump/conditional targets. Direct calls additionally get a call-kind edge
    to their target. Indirect calls/jumps get no target edge: those are the
    unresolved edges this pipeline exists to predict. Branches to a non-leader
    address are dropped with a warning.
    """
    leader_to_block = {b.start_address: b.id for b in blocks}
    next_block: dict[int, int] = {}
    for a, b in zip(blocks, blocks[1:]):
        if a.end_address == b.start_address:
            next_block[a.id] = b.id

    edges: list[FlowEdge] = []

    def transfer_to_target(block: BasicBlock) -> None:
        tgt = direct_target(block.terminator)
        if tgt is None:
            return
        dst = leader_to_block.get(tgt)
        if dst is None:
            log.warning("dangling branch target 0x%x from block at 0x%x; edge dropped",
                        tgt, block.start_address)
            return
        kind = EdgeKind.CALL if block.terminator_kind is TerminatorKind.CALL else EdgeKind.TRANSFER
        edges.append(FlowEdge(block.id, dst, kind))

    for block in blocks:
        tk = block.terminator_kind
        if tk in (TerminatorKind.RETURN, TerminatorKind.HALT, TerminatorKind.INDIRECT_JUMP):
            continue
        if tk in (TerminatorKind.JUMP, TerminatorKind.CONDITIONAL, TerminatorKind.CALL):
            transfer_to_target(block)
        if tk in (TerminatorKind.FALLTHROUGH, TerminatorKind.CONDITIONAL,
                  TerminatorKind.CALL, TerminatorKind.INDIRECT_CALL):
            nxt = next_block.get(block.id)
            if nxt is not None:
                edges.append(FlowEdge(block.id, nxt, EdgeKind.TRANSFER))
    return sorted(set(edges), key=lambda e: (e.src, e.dst, e.kind.value))


def recover_functions(blocks: list[BasicBlock], edges: list[FlowEdge],
                      ir: ProgramIR) -> list[FunctionExtent]:
    """Group blocks into function extents.

    Entries are the known symbol entries plus direct-call targets. Each entry
    claims the blocks reachable from it through transfer edges, without
    walking into another entry. A block claimed by several entries goes to
    the lowest entry address (warned); blocks left over become singleton
    functions.
    """
    if not blocks:
        return []
    leader_to_block = {b.start_address: b.id for b in blocks}
    by_id = {b.id: b for b in blocks}

    entry_addrs = set(a for a in ir.known_function_entries if a in leader_to_block)
    for e in edges:
        if e.kind is EdgeKind.CALL:
            entry_addrs.add(by_id[e.dst].start_address)

    succ: dict[int, list[int]] = {}
    for e in edges:
        if e.kind is EdgeKind.TRANSFER:
            succ.setdefault(e.src, []).append(e.dst)

    entry_blocks = {leader_to_block[a] for a in entry_addrs}
    owner: dict[int, int] = {}
    for addr in sorted(entry_addrs):
        root = leader_to_block[addr]
        stack, seen = [root], {root}
        while stack:
            cur = stack.pop()
            if cur in owner and cur != root:
                if owner[cur] != root:
                    log.warning("block at 0x%x reachable from entries 0x%x and 0x%x; kept with lower",
                                by_id[cur].start_address, by_id[owner[cur]].start_address, addr)
                continue
            owner.setdefault(cur, root)
            for nxt in succ.get(cur, ()):
                if nxt not in seen and (nxt not in entry_blocks or nxt == root):
                    seen.add(nxt)
                    stack.append(nxt)

    extents: dict[int, set[int]] = {}
    for block_id, root in owner.items():
        extents.setdefault(root, set()).add(block_id)
    for b in blocks:
        if b.id not in owner:
            extents[b.id] = {b.id}

    return sorted(
        (FunctionExtent(root, frozenset(members), by_id[root].start_address)
         for root, members in extents.items()),
        key=lambda f: f.entry_address)
