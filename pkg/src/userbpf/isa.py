"""eBPF instruction decoding, encoding, and pretty-printing.

Wire format: fixed 64-bit little-endian slots.

    byte 0      opcode
    byte 1      dst register (low nibble), src register (high nibble)
    bytes 2-3   signed 16-bit offset (bytes for memory ops, slots for jumps)
    bytes 4-7   signed 32-bit immediate

The 64-bit immediate load (LDDW, opcode 0x18) occupies two consecutive
slots; the second slot must carry opcode 0 and holds the high 32 bits of
the immediate in its imm field.

Only the 64-bit ISA plus JMP32/ALU32 is modeled.  The legacy packet
opcodes (LD_ABS/LD_IND) decode to a typed UnsupportedOpcode error: they
exist only for socket filters and have no role here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

# Instruction classes (opcode & 0x07)
CLS_LD = 0x00
CLS_LDX = 0x01
CLS_ST = 0x02
CLS_STX = 0x03
CLS_ALU = 0x04
CLS_JMP = 0x05
CLS_JMP32 = 0x06
CLS_ALU64 = 0x07

# ALU operations (opcode & 0xF0)
ALU_ADD = 0x00
ALU_SUB = 0x10
ALU_MUL = 0x20
ALU_DIV = 0x30
ALU_OR = 0x40
ALU_AND = 0x50
ALU_LSH = 0x60
ALU_RSH = 0x70
ALU_NEG = 0x80
ALU_MOD = 0x90
ALU_XOR = 0xA0
ALU_MOV = 0xB0
ALU_ARSH = 0xC0
ALU_END = 0xD0

# Jump operations (opcode & 0xF0)
JMP_JA = 0x00
JMP_JEQ = 0x10
JMP_JGT = 0x20
JMP_JGE = 0x30
JMP_JSET = 0x40
JMP_JNE = 0x50
JMP_JSGT = 0x60
JMP_JSGE = 0x70
JMP_CALL = 0x80
JMP_EXIT = 0x90
JMP_JLT = 0xA0
JMP_JLE = 0xB0
JMP_JSLT = 0xC0
JMP_JSLE = 0xD0

# Source modifier (opcode & 0x08): K = immediate, X = register
SRC_K = 0x00
SRC_X = 0x08

# Memory access size (opcode & 0x18)
SZ_W = 0x00
SZ_H = 0x08
SZ_B = 0x10
SZ_DW = 0x18

# Memory access mode (opcode & 0xE0)
MODE_IMM = 0x00
MODE_ABS = 0x20
MODE_IND = 0x40
MODE_MEM = 0x60
MODE_ATOMIC = 0xC0

OP_LDDW = 0x18
OP_CALL = 0x85
OP_EXIT = 0x95
OP_JA = 0x05

# Atomic operation codes carried in the imm field of STX|ATOMIC
ATOMIC_ADD = 0x00
ATOMIC_OR = 0x40
ATOMIC_AND = 0x50
ATOMIC_XOR = 0xA0
ATOMIC_FETCH = 0x01
ATOMIC_XCHG = 0xE1
ATOMIC_CMPXCHG = 0xF1

# src register field of an LDDW slot: what the immediate means
LDDW_CONST = 0
LDDW_MAP_REF = 1  # imm64 is a relocated map handle
LDDW_MEM_REF = 2  # imm64 is the address of a loader-registered data region

SIZE_BYTES = {SZ_W: 4, SZ_H: 2, SZ_B: 1, SZ_DW: 8}

_ALU_NAMES = {
    ALU_ADD: "add", ALU_SUB: "sub", ALU_MUL: "mul", ALU_DIV: "div",
    ALU_OR: "or", ALU_AND: "and", ALU_LSH: "lsh", ALU_RSH: "rsh",
    ALU_NEG: "neg", ALU_MOD: "mod", ALU_XOR: "xor", ALU_MOV: "mov",
    ALU_ARSH: "arsh",
}
_JMP_NAMES = {
    JMP_JA: "ja", JMP_JEQ: "jeq", JMP_JGT: "jgt", JMP_JGE: "jge",
    JMP_JSET: "jset", JMP_JNE: "jne", JMP_JSGT: "jsgt", JMP_JSGE: "jsge",
    JMP_JLT: "jlt", JMP_JLE: "jle", JMP_JSLT: "jslt", JMP_JSLE: "jsle",
}
_SIZE_SUFFIX = {SZ_W: "w", SZ_H: "h", SZ_B: "b", SZ_DW: "dw"}
_ATOMIC_NAMES = {
    ATOMIC_ADD: "add", ATOMIC_OR: "or", ATOMIC_AND: "and", ATOMIC_XOR: "xor",
}


def _valid_opcodes() -> frozenset[int]:
    ops = set()
    for alu_cls in (CLS_ALU, CLS_ALU64):
        for op in (ALU_ADD, ALU_SUB, ALU_MUL, ALU_DIV, ALU_OR, ALU_AND,
                   ALU_LSH, ALU_RSH, ALU_MOD, ALU_XOR, ALU_MOV, ALU_ARSH):
            ops.add(alu_cls | op | SRC_K)
            ops.add(alu_cls | op | SRC_X)
        ops.add(alu_cls | ALU_NEG)
    # Byteswap lives in the 32-bit ALU class only; the src bit picks le/be.
    ops.add(CLS_ALU | ALU_END | SRC_K)
    ops.add(CLS_ALU | ALU_END | SRC_X)
    for op in (JMP_JEQ, JMP_JGT, JMP_JGE, JMP_JSET, JMP_JNE, JMP_JSGT,
               JMP_JSGE, JMP_JLT, JMP_JLE, JMP_JSLT, JMP_JSLE):
        ops.add(CLS_JMP | op | SRC_K)
        ops.add(CLS_JMP | op | SRC_X)
        ops.add(CLS_JMP32 | op | SRC_K)
        ops.add(CLS_JMP32 | op | SRC_X)
    ops.add(OP_JA)
    ops.add(OP_CALL)
    ops.add(OP_EXIT)
    ops.add(OP_LDDW)
    for sz in (SZ_W, SZ_H, SZ_B, SZ_DW):
        ops.add(CLS_LDX | MODE_MEM | sz)
        ops.add(CLS_ST | MODE_MEM | sz)
        ops.add(CLS_STX | MODE_MEM | sz)
    ops.add(CLS_STX | MODE_ATOMIC | SZ_W)
    ops.add(CLS_STX | MODE_ATOMIC | SZ_DW)
    return frozenset(ops)


VALID_OPCODES = _valid_opcodes()

_LEGACY_PACKET_OPCODES = frozenset(
    CLS_LD | mode | sz
    for mode in (MODE_ABS, MODE_IND)
    for sz in (SZ_W, SZ_H, SZ_B, SZ_DW)
)

ATOMIC_OPS = frozenset({
    ATOMIC_ADD, ATOMIC_OR, ATOMIC_AND, ATOMIC_XOR,
    ATOMIC_ADD | ATOMIC_FETCH, ATOMIC_OR | ATOMIC_FETCH,
    ATOMIC_AND | ATOMIC_FETCH, ATOMIC_XOR | ATOMIC_FETCH,
    ATOMIC_XCHG, ATOMIC_CMPXCHG,
})


class IsaError(Exception):
    """Base class for bytecode format errors."""


class TruncatedProgram(IsaError):
    pass


class DanglingWideLoad(IsaError):
    pass


class MalformedRegister(IsaError):
    pass


class MalformedWidePair(IsaError):
    pass


class UnknownOpcode(IsaError):
    pass


class UnsupportedOpcode(IsaError):
    """Recognized-but-unmodeled encodings (legacy packet loads)."""


@dataclass(frozen=True)
class Instruction:
    opcode: int
    dst: int
    src: int
    offset: int  # signed 16-bit
    imm: int     # signed 32-bit

    @property
    def cls(self) -> int:
        return self.opcode & 0x07

    @property
    def op(self) -> int:
        return self.opcode & 0xF0

    @property
    def uses_reg_source(self) -> bool:
        return bool(self.opcode & SRC_X)

    def pack(self) -> bytes:
        return struct.pack("<BBhi", self.opcode,
                           (self.src << 4) | self.dst, self.offset, self.imm)


@dataclass(frozen=True)
class RegionRef:
    """Loader-resolved data region an LDDW immediate points into."""
    size: int
    writable: bool = False


@dataclass
class Program:
    """A decoded instruction sequence plus relocation side tables.

    ``instructions`` has one entry per 8-byte slot; the second slot of an
    LDDW pair appears as a pseudo-instruction with opcode 0, and the index
    of each leading LDDW slot is recorded in ``wide_imm_map``.

    ``map_refs`` and ``region_refs`` are filled by the loader: slot index
    of an LDDW whose immediate was patched to a map handle or to the base
    address of a registered data region.
    """

    instructions: tuple[Instruction, ...]
    name: str = "prog"
    wide_imm_map: frozenset[int] = frozenset()
    map_refs: dict[int, int] = field(default_factory=dict)
    region_refs: dict[int, RegionRef] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instructions)

    def imm64(self, idx: int) -> int:
        """Fused unsigned 64-bit immediate of the LDDW pair at ``idx``."""
        if idx not in self.wide_imm_map:
            raise IndexError(f"slot {idx} is not a wide load")
        lo = self.instructions[idx].imm & 0xFFFFFFFF
        hi = self.instructions[idx + 1].imm & 0xFFFFFFFF
        return (hi << 32) | lo


def decode(data: bytes, name: str = "prog") -> Program:
    """Decode raw little-endian instruction bytes into a Program.

    Jump-target validity is deliberately not checked here; that is the
    verifier's first rule and stays in one place.
    """
    if len(data) < 8 or len(data) % 8 != 0:
        raise TruncatedProgram(
            f"program length {len(data)} is not a positive multiple of 8")

    insns: list[Instruction] = []
    wide: set[int] = set()
    n_slots = len(data) // 8
    idx = 0
    while idx < n_slots:
        opcode, regs, offset, imm = struct.unpack_from("<BBhi", data, idx * 8)
        dst = regs & 0x0F
        src = regs >> 4
        if dst > 10 or src > 10:
            raise MalformedRegister(
                f"slot {idx}: register nibble out of range (dst={dst}, src={src})")
        if opcode in _LEGACY_PACKET_OPCODES:
            raise UnsupportedOpcode(
                f"slot {idx}: legacy packet-access opcode 0x{opcode:02x}")
        if opcode not in VALID_OPCODES:
            raise UnknownOpcode(f"slot {idx}: opcode 0x{opcode:02x}")
        insns.append(Instruction(opcode, dst, src, offset, imm))
        if opcode == OP_LDDW:
            if idx + 1 >= n_slots:
                raise DanglingWideLoad(
                    f"slot {idx}: wide load in final slot has no immediate slot")
            op2, regs2, off2, imm2 = struct.unpack_from("<BBhi", data, (idx + 1) * 8)
            if op2 != 0 or regs2 != 0 or off2 != 0:
                raise MalformedWidePair(
                    f"slot {idx + 1}: second slot of wide load must be zeroed "
                    f"(opcode=0x{op2:02x})")
            wide.add(idx)
            insns.append(Instruction(0, 0, 0, 0, imm2))
            idx += 2
        else:
            idx += 1
    return Program(tuple(insns), name=name, wide_imm_map=frozenset(wide))


def encode(program: Program) -> bytes:
    """Byte-exact inverse of decode for structurally valid programs."""
    return b"".join(insn.pack() for insn in program.instructions)


def _fmt_mem(reg: int, offset: int) -> str:
    if offset < 0:
        return f"[r{reg}-{-offset}]"
    return f"[r{reg}+{offset}]"


def _disasm_one(program: Program, idx: int) -> str:
    insn = program.instructions[idx]
    op = insn.opcode
    cls = insn.cls
    if idx in program.wide_imm_map:
        if insn.src == LDDW_MAP_REF:
            return f"lddw r{insn.dst}, map:{program.imm64(idx)}"
        if insn.src == LDDW_MEM_REF:
            return f"lddw r{insn.dst}, mem:0x{program.imm64(idx):x}"
        return f"lddw r{insn.dst}, 0x{program.imm64(idx):x}"
    if cls in (CLS_ALU, CLS_ALU64):
        wide = "64" if cls == CLS_ALU64 else "32"
        if insn.op == ALU_END:
            conv = "be" if insn.uses_reg_source else "le"
            return f"{conv}{insn.imm} r{insn.dst}"
        name = _ALU_NAMES[insn.op] + wide
        if insn.op == ALU_NEG:
            return f"{name} r{insn.dst}"
        src = f"r{insn.src}" if insn.uses_reg_source else str(insn.imm)
        return f"{name} r{insn.dst}, {src}"
    if cls in (CLS_JMP, CLS_JMP32):
        if op == OP_JA:
            return f"ja {insn.offset:+d}"
        if op == OP_CALL:
            if insn.src == 1:
                return f"call local {insn.imm:+d}"
            return f"call {insn.imm}"
        if op == OP_EXIT:
            return "exit"
        name = _JMP_NAMES[insn.op] + ("32" if cls == CLS_JMP32 else "")
        src = f"r{insn.src}" if insn.uses_reg_source else str(insn.imm)
        return f"{name} r{insn.dst}, {src}, {insn.offset:+d}"
    suffix = _SIZE_SUFFIX[insn.opcode & 0x18]
    if cls == CLS_LDX:
        return f"ldx{suffix} r{insn.dst}, {_fmt_mem(insn.src, insn.offset)}"
    if cls == CLS_ST:
        return f"st{suffix} {_fmt_mem(insn.dst, insn.offset)}, {insn.imm}"
    if cls == CLS_STX:
        if (insn.opcode & 0xE0) == MODE_ATOMIC:
            code = insn.imm & 0xFF
            if code == ATOMIC_XCHG:
                return f"xchg{suffix} r{insn.src}, {_fmt_mem(insn.dst, insn.offset)}"
            if code == ATOMIC_CMPXCHG:
                return f"cmpxchg{suffix} r{insn.src}, {_fmt_mem(insn.dst, insn.offset)}"
            base = _ATOMIC_NAMES.get(code & ~ATOMIC_FETCH, f"op{code:#x}")
            fetch = "fetch_" if code & ATOMIC_FETCH else ""
            return (f"atomic_{fetch}{base}{suffix} "
                    f"{_fmt_mem(insn.dst, insn.offset)}, r{insn.src}")
        return f"stx{suffix} {_fmt_mem(insn.dst, insn.offset)}, r{insn.src}"
    return f".slot 0x{op:02x}"


def disassemble(program: Program) -> str:
    """One line per instruction: ``idx: mnemonic operands``.

    A wide load prints a single line covering both of its slots.
    """
    lines = []
    idx = 0
    n = len(program.instructions)
    while idx < n:
        lines.append(f"{idx}: {_disasm_one(program, idx)}")
        idx += 2 if idx in program.wide_imm_map else 1
    return "\n".join(lines)


def assemble(entries: list[tuple]) -> Program:
    """Build a Program from (opcode, dst, src, offset, imm[, imm_hi]) tuples.

    Test/fixture convenience; a 6th element supplies the high half of a
    wide immediate and expands into the pseudo second slot.
    """
    insns: list[Instruction] = []
    wide: set[int] = set()
    for entry in entries:
        if len(entry) == 6:
            opcode, dst, src, offset, imm, imm_hi = entry
            wide.add(len(insns))
            insns.append(Instruction(opcode, dst, src, offset, imm))
            insns.append(Instruction(0, 0, 0, 0, imm_hi))
        else:
            opcode, dst, src, offset, imm = entry
            insns.append(Instruction(opcode, dst, src, offset, imm))
            if opcode == OP_LDDW:
                raise ValueError("wide load entries need an explicit high half")
    return Program(tuple(insns), wide_imm_map=frozenset(wide))
