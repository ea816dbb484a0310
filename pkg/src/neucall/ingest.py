"""Canonical in-memory program representation and its loaders.

Two ways in: ``load_elf`` (linear-sweep decode of a real ELF via a pluggable
decoder) and ``import_program_ir`` (the JSONL interchange format, for programs
disassembled by external tooling). ``export_program_ir`` writes the same JSONL
canonically so outputs are byte-stable.
"""
from __future__ import annotations

import enum
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

from .errors import InvariantViolation, NotElf, SchemaError, UnsupportedMachine

log = logging.getLogger(__name__)

IR_FORMAT = "neucall-ir"
IR_VERSION = 1


class SectionKind(str, enum.Enum):
    CODE = "code"
    DATA = "data"
    READONLY_DATA = "readonly_data"
    OTHER = "other"


#: section kinds treated as "data-like" by the symbolizer
DATA_LIKE = (SectionKind.DATA, SectionKind.READONLY_DATA)


@dataclass(frozen=True)
class Section:
    name: str
    kind: SectionKind
    virtual_address: int
    size: int
    data: bytes | None = None  # None for zero-filled (NOBITS) sections

    def contains(self, address: int) -> bool:
        return self.virtual_address <= address < self.virtual_address + self.size

    @property
    def end(self) -> int:
        return self.virtual_address + self.size


@dataclass(frozen=True)
class Immediate:
    """A symbolization-eligible immediate/displacement of one instruction.

    Control-flow displacement targets (call/jmp/jcc) are *not* immediates:
    they feed CFG edges, not cross-references.
    """
    value: int
    width: int  # bytes, one of 1/2/4/8
    operand_index: int


@dataclass(frozen=True)
class Instruction:
    address: int
    length: int
    mnemonic: str
    operand_tokens: tuple[str, ...] = ()
    immediates: tuple[Immediate, ...] = ()

    @property
    def end(self) -> int:
        return self.address + self.length


@dataclass(frozen=True)
class ProgramIR:
    image_base: int
    image_limit: int
    sections: tuple[Section, ...]
    instructions: tuple[Instruction, ...]
    known_function_entries: frozenset[int] = frozenset()
    project_id: str = ""
    build_tag: str = ""

    def section_at(self, address: int) -> Section | None:
        for sec in self.sections:
            if sec.contains(address):
                return sec
        return None

    def code_sections(self) -> list[Section]:
        return [s for s in self.sections if s.kind is SectionKind.CODE]

    def data_sections(self) -> list[Section]:
        return [s for s in self.sections if s.kind in DATA_LIKE]


def validate_ir(ir: ProgramIR) -> None:
    """Check every ProgramIR/Section/Instruction invariant, raising on the first break."""
    if not ir.image_base < ir.image_limit:
        raise InvariantViolation(f"image_base 0x{ir.image_base:x} >= image_limit 0x{ir.image_limit:x}")
    spans = sorted((s.virtual_address, s.end, s.name) for s in ir.sections)
    for (a0, e0, n0), (a1, e1, n1) in zip(spans, spans[1:]):
        if a1 < e0:
            raise InvariantViolation(f"sections {n0} and {n1} overlap")
    for sec in ir.sections:
        if sec.size < 0 or sec.virtual_address + sec.size > 2**64:
            raise InvariantViolation(f"section {sec.name} range overflows")
        if not (ir.image_base <= sec.virtual_address and sec.end <= ir.image_limit):
            raise InvariantViolation(f"section {sec.name} outside image range")
        if sec.data is not None and len(sec.data) != sec.size:
            raise InvariantViolation(f"section {sec.name} data length != size")
    prev_end = -1
    for insn in ir.instructions:
        if insn.length < 1:
            raise InvariantViolation(f"instruction at 0x{insn.address:x} has length {insn.length}")
        if insn.address < prev_end:
            raise InvariantViolation(f"instructions overlap at 0x{insn.address:x}")
        prev_end = insn.end
        sec = ir.section_at(insn.address)
        if sec is None or sec.kind is not SectionKind.CODE:
            raise InvariantViolation(f"instruction at 0x{insn.address:x} outside code sections")
        for imm in insn.immediates:
            if imm.width not in (1, 2, 4, 8):
                raise InvariantViolation(f"immediate width {imm.width} at 0x{insn.address:x}")


class Decoder(Protocol):
    """Instruction-decoding capability plugged into load_elf."""

    def supports_machine(self, e_machine: int) -> bool: ...

    def decode_one(self, data: bytes, offset: int, address: int) -> Instruction:
        """Decode one instruction; raises DecodeError on failure."""
        ...


# --- ELF loading -------------------------------------------------------------

_ELF_MAGIC = b"\x7fELF"
_SHT_SYMTAB = 2
_SHT_NOBITS = 8
_SHF_WRITE = 0x1
_SHF_ALLOC = 0x2
_SHF_EXECINSTR = 0x4
_STT_FUNC = 2

#: realign step after a failed decode in the linear sweep
DECODE_REALIGN = 4


def _section_kind(sh_type: int, sh_flags: int) -> SectionKind:
    if sh_flags & _SHF_EXECINSTR:
        return SectionKind.CODE
    if sh_flags & _SHF_WRITE:
        return SectionKind.DATA
    return SectionKind.READONLY_DATA


def load_elf(path: str | Path, decoder: Decoder, project_id: str = "", build_tag: str = "") -> ProgramIR:
    """Load an ELF64 file and linear-sweep decode its code sections.

    Decode failures are skipped to the next DECODE_REALIGN boundary with a
    warning, mirroring how sweep disassemblers survive data islands in .text.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != _ELF_MAGIC:
        raise NotElf(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 64 or raw[4] != 2 or raw[5] != 1:  # ELFCLASS64, little-endian
        raise UnsupportedMachine(f"{path}: only little-endian ELF64 is supported")
    e_machine = struct.unpack_from("<H", raw, 18)[0]
    if not decoder.supports_machine(e_machine):
        raise UnsupportedMachine(f"{path}: machine {e_machine} unsupported by decoder")
    e_shoff, = struct.unpack_from("<Q", raw, 40)
    e_shentsize, e_shnum, e_shstrndx = struct.unpack_from("<HHH", raw, 58)

    headers = []
    for i in range(e_shnum):
        off = e_shoff + i * e_shentsize
        name_off, sh_type, sh_flags = struct.unpack_from("<IIQ", raw, off)
        sh_addr, sh_offset, sh_size = struct.unpack_from("<QQQ", raw, off + 16)
        sh_link, = struct.unpack_from("<I", raw, off + 40)
        sh_entsize, = struct.unpack_from("<Q", raw, off + 56)
        headers.append((name_off, sh_type, sh_flags, sh_addr, sh_offset, sh_size, sh_link, sh_entsize))

    shstr_off = headers[e_shstrndx][4] if e_shstrndx < len(headers) else 0

    def sec_name(name_off: int) -> str:
        end = raw.index(b"\x00", shstr_off + name_off)
        return raw[shstr_off + name_off:end].decode("ascii", "replace")

    sections: list[Section] = []
    for (name_off, sh_type, sh_flags, sh_addr, sh_offset, sh_size, _, _) in headers:
        if not (sh_flags & _SHF_ALLOC) or sh_size == 0:
            continue
        data = None if sh_type == _SHT_NOBITS else raw[sh_offset:sh_offset + sh_size]
        sections.append(Section(sec_name(name_off), _section_kind(sh_type, sh_flags),
                                sh_addr, sh_size, data))
    sections.sort(key=lambda s: s.virtual_address)
    if not sections:
        raise InvariantViolation(f"{path}: no allocatable sections")

    entries: set[int] = set()
    for (_, sh_type, _, _, sh_offset, sh_size, sh_link, sh_entsize) in headers:
        if sh_type != _SHT_SYMTAB or sh_entsize == 0:
            continue
        for off in range(sh_offset, sh_offset + sh_size, sh_entsize):
            st_info = raw[off + 4]
            st_value, = struct.unpack_from("<Q", raw, off + 8)
            if st_info & 0xF == _STT_FUNC and st_value != 0:
                entries.add(st_value)

    instructions: list[Instruction] = []
    for sec in sections:
        if sec.kind is not SectionKind.CODE or sec.data is None:
            continue
        instructions.extend(linear_sweep(sec, decoder))

    ir = ProgramIR(
        image_base=min(s.virtual_address for s in sections),
        image_limit=max(s.end for s in sections),
        sections=tuple(sections),
        instructions=tuple(sorted(instructions, key=lambda i: i.address)),
        known_function_entries=frozenset(entries),
        project_id=project_id,
        build_tag=build_tag,
    )
    validate_ir(ir)
    return ir


def linear_sweep(sec: Section, decoder: Decoder) -> list[Instruction]:
    """Decode a code section front to back, realigning past failures."""
    from .errors import DecodeError

    out: list[Instruction] = []
    off = 0
    while off < sec.size:
        addr = sec.virtual_address + off
        try:
            insn = decoder.decode_one(sec.data, off, addr)
        except DecodeError as exc:
            skip_to = ((off // DECODE_REALIGN) + 1) * DECODE_REALIGN
            log.warning("decode failed at 0x%x (%s); realigning to 0x%x",
                        addr, exc.reason or "bad opcode", sec.virtual_address + skip_to)
            off = skip_to
            continue
        out.append(insn)
        off += insn.length
    return out


# --- JSONL interchange --------------------------------------------------------

def _hx(v: int) -> str:
    return f"0x{v:x}"


def _parse_hex(s: object, line: int, key: str) -> int:
    if not isinstance(s, str) or not s.startswith("0x"):
        raise SchemaError(line, f"{key!r} must be a 0x-prefixed hex string, got {s!r}")
    try:
        return int(s, 16)
    except ValueError:
        raise SchemaError(line, f"{key!r} is not valid hex: {s!r}") from None


def export_program_ir(ir: ProgramIR, path: str | Path) -> None:
    """Write canonical JSONL: sorted keys, lowercase hex, fixed record order."""
    lines = [json.dumps({
        "format": IR_FORMAT, "version": IR_VERSION,
        "image_base": _hx(ir.image_base), "image_limit": _hx(ir.image_limit),
        "project_id": ir.project_id, "build_tag": ir.build_tag,
    }, sort_keys=True, separators=(",", ":"))]
    for sec in sorted(ir.sections, key=lambda s: s.virtual_address):
        lines.append(json.dumps({
            "rec": "section", "name": sec.name, "kind": sec.kind.value,
            "addr": _hx(sec.virtual_address), "size": sec.size,
            "data": sec.data.hex() if sec.data is not None else None,
        }, sort_keys=True, separators=(",", ":")))
    for entry in sorted(ir.known_function_entries):
        lines.append(json.dumps({"rec": "func_entry", "address": _hx(entry)},
                                sort_keys=True, separators=(",", ":")))
    for insn in ir.instructions:
        lines.append(json.dumps({
            "rec": "insn", "address": _hx(insn.address), "len": insn.length,
            "mnemonic": insn.mnemonic, "tokens": list(insn.operand_tokens),
            "imms": [{"v": _hx(im.value), "w": im.width, "op": im.operand_index}
                     for im in insn.immediates],
        }, sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def import_program_ir(path: str | Path) -> ProgramIR:
    """Load the JSONL format; validates every ProgramIR invariant."""
    text = Path(path).read_text(encoding="utf-8")
    records: list[tuple[int, dict]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(lineno, f"invalid JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise SchemaError(lineno, "record is not an object")
        records.append((lineno, obj))
    if not records:
        raise SchemaError(0, "empty file")

    lineno, header = records[0]
    if header.get("format") != IR_FORMAT:
        raise SchemaError(lineno, f"unexpected format {header.get('format')!r}")
    if header.get("version") != IR_VERSION:
        raise SchemaError(lineno, f"unsupported version {header.get('version')!r}")
    image_base = _parse_hex(header.get("image_base"), lineno, "image_base")
    image_limit = _parse_hex(header.get("image_limit"), lineno, "image_limit")

    sections: list[Section] = []
    entries: set[int] = set()
    instructions: list[Instruction] = []
    for lineno, obj in records[1:]:
        rec = obj.get("rec")
        if rec == "section":
            for key in ("name", "kind", "addr", "size"):
                if key not in obj:
                    raise SchemaError(lineno, f"section record missing {key!r}")
            try:
                kind = SectionKind(obj["kind"])
            except ValueError:
                raise SchemaError(lineno, f"unknown section kind {obj['kind']!r}") from None
            data = bytes.fromhex(obj["data"]) if obj.get("data") is not None else None
            sections.append(Section(obj["name"], kind, _parse_hex(obj["addr"], lineno, "addr"),
                                    int(obj["size"]), data))
        elif rec == "func_entry":
            entries.add(_parse_hex(obj.get("address"), lineno, "address"))
        elif rec == "insn":
            for key in ("address", "len", "mnemonic"):
                if key not in obj:
                    raise SchemaError(lineno, f"insn record missing {key!r}")
            imms = []
            for im in obj.get("imms", []):
                imms.append(Immediate(_parse_hex(im.get("v"), lineno, "v"),
                                      int(im.get("w", 0)), int(im.get("op", 0))))
            instructions.append(Instruction(
                _parse_hex(obj["address"], lineno, "address"), int(obj["len"]),
                str(obj["mnemonic"]), tuple(str(t) for t in obj.get("tokens", [])),
                tuple(imms)))
        else:
            raise SchemaError(lineno, f"unknown record type {rec!r}")

    ir = ProgramIR(
        image_base=image_base, image_limit=image_limit,
        sections=tuple(sorted(sections, key=lambda s: s.virtual_address)),
        instructions=tuple(sorted(instructions, key=lambda i: i.address)),
        known_function_entries=frozenset(entries),
        project_id=str(header.get("project_id", "")),
        build_tag=str(header.get("build_tag", "")),
    )
    validate_ir(ir)
    return ir
