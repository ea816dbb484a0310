"""Fixture decoder for a small documented x86_64 subset.

Covers enough of the ISA for hand-built fixtures and the synthetic corpus:

    nop / hlt / ret
    push r64;  push imm32
    mov r32, imm32;  mov r64, imm32 (sign-extended);  movabs r64, imm64
    mov r64, r64
    mov r64, [disp32];  mov [disp32], r64   (absolute SIB addressing)
    lea r64, [disp32]
    call rel32;  call r64
    jmp rel32;  jmp rel8;  jmp r64
    jcc rel32;  jcc rel8

Conventions this module establishes for the rest of the pipeline:

* direct branch/call targets are resolved to absolute addresses and appear as
  a ``0x..`` operand token, never in ``immediates`` (they feed CFG edges, not
  cross-references);
* data-reference immediates and address constants (mov/lea/push forms, and
  absolute displacements) do go into ``immediates`` and are the symbolizer's
  input.

Real binaries are expected to arrive through the JSONL import path instead.
"""
from __future__ import annotations

import struct

from .errors import DecodeError
from .ingest import Immediate, Instruction

EM_X86_64 = 62

REG64 = ("rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
         "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")
REG32 = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi",
         "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d")

_CC_NAMES = ("jo", "jno", "jb", "jae", "je", "jne", "jbe", "ja",
             "js", "jns", "jp", "jnp", "jl", "jge", "jle", "jg")

_ABS_SIB = 0x25  # index=none, base=101 (disp32 absolute)


def _hx(v: int) -> str:
    return f"0x{v:x}"


def _i32(data: bytes, off: int) -> int:
    return struct.unpack_from("<i", data, off)[0]


def _u32(data: bytes, off: int) -> int:
    return struct.unpack_from("<I", data, off)[0]


def _u64(data: bytes, off: int) -> int:
    return struct.unpack_from("<Q", data, off)[0]


class FixtureDecoder:
    """Decoder capability over the documented subset above."""

    def supports_machine(self, e_machine: int) -> bool:
        return e_machine == EM_X86_64

    def decode_one(self, data: bytes, offset: int, address: int) -> Instruction:
        try:
            return self._decode(data, offset, address)
        except (IndexError, struct.error):
            raise DecodeError(address, "truncated instruction") from None

    def _decode(self, data: bytes, off: int, addr: int) -> Instruction:
        start = off
        rex = 0
        if 0x40 <= data[off] <= 0x4F:
            rex = data[off]
            off += 1
        rex_w = bool(rex & 0x8)
        rex_r = (rex >> 2) & 1
        rex_b = rex & 1
        op = data[off]
        off += 1

        def done(mnemonic: str, tokens: tuple[str, ...], imms: tuple[Immediate, ...], end: int) -> Instruction:
            return Instruction(addr, end - start, mnemonic, tokens, imms)

        if op == 0x90 and not rex:
            return done("nop", (), (), off)
        if op == 0xF4 and not rex:
            return done("hlt", (), (), off)
        if op == 0xC3 and not rex:
            return done("ret", (), (), off)
        if 0x50 <= op <= 0x57:
            reg = (op - 0x50) | (rex_b << 3)
            return done("push", (REG64[reg],), (), off)
        if op == 0x68 and not rex:
            v = _u32(data, off)
            return done("push", (_hx(v),), (Immediate(v, 4, 0),), off + 4)
        if 0xB8 <= op <= 0xBF:
            reg = (op - 0xB8) | (rex_b << 3)
            if rex_w:
                v = _u64(data, off)
                return done("mov", (REG64[reg], _hx(v)), (Immediate(v, 8, 1),), off + 8)
            v = _u32(data, off)
            return done("mov", (REG32[reg], _hx(v)), (Immediate(v, 4, 1),), off + 4)
        if op == 0xC7 and rex_w:
            modrm = data[off]
            off += 1
            if modrm >> 6 == 0b11 and (modrm >> 3) & 7 == 0:
                reg = (modrm & 7) | (rex_b << 3)
                v = _u32(data, off)
                return done("mov", (REG64[reg], _hx(v)), (Immediate(v, 4, 1),), off + 4)
            raise DecodeError(addr, "unsupported C7 form")
        if op in (0x89, 0x8B, 0x8D) and rex_w:
            modrm = data[off]
            off += 1
            reg = ((modrm >> 3) & 7) | (rex_r << 3)
            mod, rm = modrm >> 6, modrm & 7
            if mod == 0b11 and op in (0x89, 0x8B):
                rm_reg = rm | (rex_b << 3)
                # 89: mov rm, reg (store direction); 8B: mov reg, rm
                toks = (REG64[rm_reg], REG64[reg]) if op == 0x89 else (REG64[reg], REG64[rm_reg])
                return done("mov", toks, (), off)
            if mod == 0b00 and rm == 0b100 and data[off] == _ABS_SIB:
                off += 1
                disp = _u32(data, off)
                off += 4
                mem = ("[", _hx(disp), "]")
                if op == 0x89:
                    return done("mov", mem + (REG64[reg],), (Immediate(disp, 4, 0),), off)
                mnem = "lea" if op == 0x8D else "mov"
                return done(mnem, (REG64[reg],) + mem, (Immediate(disp, 4, 1),), off)
            raise DecodeError(addr, f"unsupported modrm 0x{modrm:02x} for opcode 0x{op:02x}")
        if op == 0xE8 and not rex:
            target = (addr + 5 + _i32(data, off)) & (2**64 - 1)
            return done("call", (_hx(target),), (), off + 4)
        if op == 0xE9 and not rex:
            target = (addr + 5 + _i32(data, off)) & (2**64 - 1)
            return done("jmp", (_hx(target),), (), off + 4)
        if op == 0xEB and not rex:
            rel = struct.unpack_from("<b", data, off)[0]
            target = (addr + 2 + rel) & (2**64 - 1)
            return done("jmp", (_hx(target),), (), off + 1)
        if 0x70 <= op <= 0x7F and not rex:
            rel = struct.unpack_from("<b", data, off)[0]
            target = (addr + 2 + rel) & (2**64 - 1)
            return done(_CC_NAMES[op - 0x70], (_hx(target),), (), off + 1)
        if op == 0x0F and not rex:
            op2 = data[off]
            off += 1
            if 0x80 <= op2 <= 0x8F:
                target = (addr + 6 + _i32(data, off)) & (2**64 - 1)
                return done(_CC_NAMES[op2 - 0x80], (_hx(target),), (), off + 4)
            raise DecodeError(addr, f"unsupported 0F opcode 0x{op2:02x}")
        if op == 0xFF:
            modrm = data[off]
            off += 1
            ext = (modrm >> 3) & 7
            if modrm >> 6 == 0b11 and ext in (2, 4):
                reg = (modrm & 7) | (rex_b << 3)
                return done("call" if ext == 2 else "jmp", (REG64[reg],), (), off)
            raise DecodeError(addr, f"unsupported FF form 0x{modrm:02x}")
        raise DecodeError(addr, f"unknown opcode 0x{op:02x}")


# --- encoders (test fixtures and the synthetic generator) --------------------

def _reg(name: str) -> int:
    return REG64.index(name)


def _rex(w: int, r: int, b: int) -> bytes:
    return bytes([0x40 | (w << 3) | (r << 2) | b])


def nop() -> bytes:
    return b"\x90"


def hlt() -> bytes:
    return b"\xf4"


def ret() -> bytes:
    return b"\xc3"


def push_r64(reg: str) -> bytes:
    r = _reg(reg)
    pre = b"\x41" if r >= 8 else b""
    return pre + bytes([0x50 + (r & 7)])


def push_imm32(v: int) -> bytes:
    return b"\x68" + struct.pack("<I", v)


def mov_r32_imm32(reg: str, v: int) -> bytes:
    return bytes([0xB8 + REG32.index(reg)]) + struct.pack("<I", v)


def mov_r64_imm64(reg: str, v: int) -> bytes:
    r = _reg(reg)
    return _rex(1, 0, r >> 3) + bytes([0xB8 + (r & 7)]) + struct.pack("<Q", v)


def mov_r64_imm32(reg: str, v: int) -> bytes:
    r = _reg(reg)
    return _rex(1, 0, r >> 3) + bytes([0xC7, 0xC0 + (r & 7)]) + struct.pack("<I", v)


def mov_r64_r64(dst: str, src: str) -> bytes:
    d, s = _reg(dst), _reg(src)
    return _rex(1, s >> 3, d >> 3) + bytes([0x89, 0xC0 | ((s & 7) << 3) | (d & 7)])


def mov_r64_abs(reg: str, addr: int) -> bytes:
    r = _reg(reg)
    return _rex(1, r >> 3, 0) + bytes([0x8B, ((r & 7) << 3) | 0x04, _ABS_SIB]) + struct.pack("<I", addr)


def mov_abs_r64(addr: int, reg: str) -> bytes:
    r = _reg(reg)
    return _rex(1, r >> 3, 0) + bytes([0x89, ((r & 7) << 3) | 0x04, _ABS_SIB]) + struct.pack("<I", addr)


def lea_r64_abs(reg: str, addr: int) -> bytes:
    r = _reg(reg)
    return _rex(1, r >> 3, 0) + bytes([0x8D, ((r & 7) << 3) | 0x04, _ABS_SIB]) + struct.pack("<I", addr)


def call_rel32(insn_addr: int, target: int) -> bytes:
    return b"\xe8" + struct.pack("<i", target - (insn_addr + 5))


def jmp_rel32(insn_addr: int, target: int) -> bytes:
    return b"\xe9" + struct.pack("<i", target - (insn_addr + 5))


def jcc_rel32(mnemonic: str, insn_addr: int, target: int) -> bytes:
    cc = _CC_NAMES.index(mnemonic)
    return bytes([0x0F, 0x80 + cc]) + struct.pack("<i", target - (insn_addr + 6))


def call_r64(reg: str) -> bytes:
    r = _reg(reg)
    pre = b"\x41" if r >= 8 else b""
    return pre + bytes([0xFF, 0xD0 + (r & 7)])


def jmp_r64(reg: str) -> bytes:
    r = _reg(reg)
    pre = b"\x41" if r >= 8 else b""
    return pre + bytes([0xFF, 0xE0 + (r & 7)])
