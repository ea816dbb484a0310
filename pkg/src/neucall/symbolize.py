"""Cross-reference scanning and data-node partitioning.

The scan is deliberately conservative: code-side immediates must be at least
4 bytes wide, data-side words are read at aligned pointer-width offsets only.
Both rules trade recall for precision, since there is no relocation or type
information to lean on in a stripped binary.
"""
from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass
from pathlib import Path

from .ingest import DATA_LIKE, ProgramIR, Section, SectionKind

POINTER_WIDTH = 8
MIN_IMMEDIATE_WIDTH = 4
MAX_DATA_NODE_SIZE = 64


class XRefKind(str, enum.Enum):
    C2C = "c2c"
    C2D = "c2d"
    D2C = "d2c"
    D2D = "d2d"


@dataclass(frozen=True)
class XRef:
    from_address: int
    to_address: int
    kind: XRefKind


@dataclass(frozen=True)
class DataNode:
    id: int
    address: int
    size: int
    section: str

    def contains(self, address: int) -> bool:
        return self.address <= address < self.address + self.size


def classify_xref(from_kind: SectionKind, to_kind: SectionKind) -> XRefKind:
    """Membership rule: code vs data-like on each side. readonly_data is data-like."""
    from_code = from_kind is SectionKind.CODE
    to_code = to_kind is SectionKind.CODE
    if from_code:
        return XRefKind.C2C if to_code else XRefKind.C2D
    return XRefKind.D2C if to_code else XRefKind.D2D


def _target_section(ir: ProgramIR, address: int) -> Section | None:
    sec = ir.section_at(address)
    if sec is None or sec.kind is SectionKind.OTHER:
        return None
    return sec


def scan_xrefs(ir: ProgramIR) -> list[XRef]:
    """All cross-references discoverable from immediates and data words.

    Code side: every instruction immediate of width >= MIN_IMMEDIATE_WIDTH
    whose value lands in a code/data section. Data side: every aligned
    pointer-width word of a data-like section whose value lands in a
    code/data section. Deduplicated, sorted by (from, to).
    """
    refs: set[XRef] = set()
    for insn in ir.instructions:
        src = ir.section_at(insn.address)
        for imm in insn.immediates:
            if imm.width < MIN_IMMEDIATE_WIDTH:
                continue
            dst = _target_section(ir, imm.value)
            if dst is None:
                continue
            refs.add(XRef(insn.address, imm.value, classify_xref(src.kind, dst.kind)))
    for sec in ir.data_sections():
        if sec.data is None:
            continue
        start = sec.virtual_address
        first = (-start) % POINTER_WIDTH  # first absolute-aligned offset
        for off in range(first, sec.size - POINTER_WIDTH + 1, POINTER_WIDTH):
            value = struct.unpack_from("<Q", sec.data, off)[0]
            dst = _target_section(ir, value)
            if dst is None:
                continue
            refs.add(XRef(start + off, value, classify_xref(sec.kind, dst.kind)))
    return sorted(refs, key=lambda r: (r.from_address, r.to_address))


def partition_data(ir: ProgramIR, xrefs: list[XRef],
                   max_node_size: int = MAX_DATA_NODE_SIZE) -> list[DataNode]:
    """Split data-like sections into nodes at the to-data label addresses.

    Each labeled node runs from its label to the next label, the section end,
    or the size cap, whichever comes first. Bytes before the first label form
    one anonymous node (also capped). Sections without labels become a single
    anonymous node.
    """
    labels_by_sec: dict[str, set[int]] = {}
    for ref in xrefs:
        if ref.kind in (XRefKind.C2D, XRefKind.D2D):
            sec = ir.section_at(ref.to_address)
            if sec is not None:
                labels_by_sec.setdefault(sec.name, set()).add(ref.to_address)

    nodes: list[DataNode] = []
    for sec in sorted(ir.data_sections(), key=lambda s: s.virtual_address):
        labels = sorted(labels_by_sec.get(sec.name, ()))
        if not labels or labels[0] > sec.virtual_address:
            upto = labels[0] if labels else sec.end
            size = min(upto - sec.virtual_address, max_node_size)
            nodes.append(DataNode(len(nodes), sec.virtual_address, size, sec.name))
        for i, label in enumerate(labels):
            upto = labels[i + 1] if i + 1 < len(labels) else sec.end
            size = min(upto - label, max_node_size)
            nodes.append(DataNode(len(nodes), label, size, sec.name))
    return nodes


def dump_xrefs_csv(xrefs: list[XRef], path: str | Path) -> None:
    """CSV dump for diffing against an external symbolizer."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from", "to", "kind"])
        for ref in xrefs:
            writer.writerow([f"0x{ref.from_address:x}", f"0x{ref.to_address:x}", ref.kind.value])
