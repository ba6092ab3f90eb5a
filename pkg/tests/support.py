"""Shared test helpers: a tiny assembler DSL for building programs."""

from userbpf import isa


def mov(dst, imm):
    return (0xB7, dst, 0, 0, imm)


def mov_reg(dst, src):
    return (0xBF, dst, src, 0, 0)


def mov32(dst, imm):
    return (0xB4, dst, 0, 0, imm)


def alu64(op, dst, imm):
    return (isa.CLS_ALU64 | op | isa.SRC_K, dst, 0, 0, imm)


def alu64_reg(op, dst, src):
    return (isa.CLS_ALU64 | op | isa.SRC_X, dst, src, 0, 0)


def alu32(op, dst, imm):
    return (isa.CLS_ALU | op | isa.SRC_K, dst, 0, 0, imm)


def alu32_reg(op, dst, src):
    return (isa.CLS_ALU | op | isa.SRC_X, dst, src, 0, 0)


def add(dst, imm):
    return alu64(isa.ALU_ADD, dst, imm)


def neg(dst):
    return (0x87, dst, 0, 0, 0)


def endian(dst, width, big=False):
    return (0xDC if big else 0xD4, dst, 0, 0, width)


def jmp(op, dst, imm, off):
    return (isa.CLS_JMP | op | isa.SRC_K, dst, 0, off, imm)


def jmp_reg(op, dst, src, off):
    return (isa.CLS_JMP | op | isa.SRC_X, dst, src, off, 0)


def jmp32(op, dst, imm, off):
    return (isa.CLS_JMP32 | op | isa.SRC_K, dst, 0, off, imm)


def ja(off):
    return (0x05, 0, 0, off, 0)


def call(helper_id):
    return (0x85, 0, 0, 0, helper_id)


def call_local(off):
    return (0x85, 0, 1, 0, off)


def exit_():
    return (0x95, 0, 0, 0, 0)


def lddw(dst, imm64):
    return (0x18, dst, 0, 0, imm64 & 0xFFFFFFFF, (imm64 >> 32) & 0xFFFFFFFF)


def lddw_map(dst, handle):
    return (0x18, dst, 1, 0, handle, 0)


def lddw_mem(dst, addr):
    return (0x18, dst, 2, 0, addr & 0xFFFFFFFF, (addr >> 32) & 0xFFFFFFFF)


def ldx(size, dst, src, off):
    return (isa.CLS_LDX | isa.MODE_MEM | size, dst, src, off, 0)


def stx(size, dst, src, off):
    return (isa.CLS_STX | isa.MODE_MEM | size, dst, src, off, 0)


def st(size, dst, off, imm):
    return (isa.CLS_ST | isa.MODE_MEM | size, dst, 0, off, imm)


def atomic(size, dst, src, off, op):
    return (isa.CLS_STX | isa.MODE_ATOMIC | size, dst, src, off, op)


def prog(*entries, name="test", map_refs=None, region_refs=None):
    p = isa.assemble(list(entries))
    p.name = name
    if map_refs:
        p.map_refs.update(map_refs)
    if region_refs:
        p.region_refs.update(region_refs)
    return p
