"""Program execution: context, helper/FFI dispatch, and the interpreter.

Addresses inside a running program are real process addresses.  The stack
is a real buffer, map values are real pointers into shared segments, and
the probe context is the register save area the hook trampoline filled.
That keeps the interpreter, the optional JIT, and hooked native code in
one coherent address space.

SFI mode decides whether each load/store is checked against the region
table first.  With SFI off (legitimate only for strict-verified
programs) the access is issued directly; a verifier bug would fault the
host, which is precisely the bargain static verification makes.

Execution engines are pluggable behind execute(): the interpreter is
always available, and a compiled variant can register itself via
set_jit_backend() if it can take the program (same contract, same
differential suite).
"""

from __future__ import annotations

import ctypes
import threading
from dataclasses import dataclass

from . import isa, native

U64 = 0xFFFFFFFFFFFFFFFF
U32 = 0xFFFFFFFF

STACK_FRAME = 512
MAX_CALL_DEPTH = 8
STACK_TOTAL = STACK_FRAME * MAX_CALL_DEPTH

DEFAULT_BUDGET = 1_000_000

FFI_ID_BASE = 100_000


class EngineError(Exception):
    pass


class BudgetExhausted(EngineError):
    pass


class SfiViolation(EngineError):
    def __init__(self, pc: int, addr: int, size: int, write: bool):
        self.pc, self.addr, self.size, self.write = pc, addr, size, write
        kind = "store" if write else "load"
        super().__init__(f"pc {pc}: {kind} of {size} bytes at {addr:#x} "
                         f"outside permitted regions")


class UnregisteredHelper(EngineError):
    pass


class DuplicateHelperId(EngineError):
    pass


class DuplicateName(EngineError):
    pass


class ExecError(EngineError):
    pass


@dataclass(frozen=True)
class MemoryRegion:
    base: int
    size: int
    writable: bool = True
    name: str = ""

    def covers(self, addr: int, size: int) -> bool:
        return self.base <= addr and addr + size <= self.base + self.size


class ExecutionContext:
    """Registers, a real stack buffer, and the permitted memory regions.

    One context per execution; reuse via reset() is cheap and encouraged
    on hot paths.  r10 always holds the top of the current stack frame.
    """

    def __init__(self, regions: list[MemoryRegion] | None = None,
                 instruction_budget: int = DEFAULT_BUDGET, sfi: bool = True):
        self._stack_buf = ctypes.create_string_buffer(STACK_TOTAL)
        self.stack_base = ctypes.addressof(self._stack_buf)
        self.stack_top = self.stack_base + STACK_TOTAL
        self.registers = [0] * 11
        self.registers[10] = self.stack_top
        self.regions: list[MemoryRegion] = list(regions or [])
        self.instruction_budget = instruction_budget
        self.sfi = sfi

    def reset(self, *args: int) -> "ExecutionContext":
        regs = self.registers
        for i in range(10):
            regs[i] = 0
        regs[10] = self.stack_top
        for i, v in enumerate(args[:5]):
            regs[i + 1] = v & U64
        return self

    def add_region(self, base: int, size: int, writable: bool = True,
                   name: str = "") -> MemoryRegion:
        r = MemoryRegion(base, size, writable, name)
        self.regions.append(r)
        return r

    def set_sfi_mode(self, on: bool) -> "ExecutionContext":
        self.sfi = on
        return self

    def check(self, addr: int, size: int, write: bool) -> bool:
        if self.stack_base <= addr and addr + size <= self.stack_top:
            return True
        for r in self.regions:
            if r.covers(addr, size) and (r.writable or not write):
                return True
        return False


class HelperRegistry:
    """Numbered helpers plus named FFI functions (ids from 100000 up).

    Host functions take five u64 arguments and return one u64; they run
    with real pointers, so anything a helper dereferences should come
    from the program's own memory or be read through a fault-safe copy.
    """

    def __init__(self):
        self.table: dict[int, callable] = {}
        self.ffi_table: dict[str, int] = {}
        self._next_ffi = FFI_ID_BASE
        self._thunks: dict[int, object] = {}  # id -> ctypes thunk (JIT path)

    def register_helper(self, helper_id: int, fn) -> "HelperRegistry":
        if helper_id in self.table:
            raise DuplicateHelperId(f"helper {helper_id} already bound")
        self.table[helper_id] = fn
        return self

    def register_ffi(self, name: str, fn) -> int:
        if name in self.ffi_table:
            raise DuplicateName(f"FFI function {name!r} already bound")
        ffi_id = self._next_ffi
        self._next_ffi += 1
        self.ffi_table[name] = ffi_id
        self.table[ffi_id] = fn
        return ffi_id

    def ffi_id(self, name: str) -> int | None:
        return self.ffi_table.get(name)

    def allowed_ids(self) -> frozenset[int]:
        return frozenset(self.table)

    def get(self, helper_id: int):
        try:
            return self.table[helper_id]
        except KeyError:
            raise UnregisteredHelper(f"helper {helper_id}") from None

    def native_thunk_addr(self, helper_id: int) -> int:
        """Address of a C-callable thunk for this helper (JIT call target)."""
        thunk = self._thunks.get(helper_id)
        if thunk is None:
            fn = self.get(helper_id)
            sig = ctypes.CFUNCTYPE(ctypes.c_uint64, *([ctypes.c_uint64] * 5))

            def shim(a, b, c, d, e, _fn=fn):
                return _fn(a, b, c, d, e) & U64

            thunk = sig(shim)
            self._thunks[helper_id] = thunk
        return ctypes.cast(thunk, ctypes.c_void_p).value


def _s64(v: int) -> int:
    return v - (1 << 64) if v & (1 << 63) else v


def _s32(v: int) -> int:
    v &= U32
    return v - (1 << 32) if v & (1 << 31) else v


_READERS = {1: ctypes.c_uint8, 2: ctypes.c_uint16,
            4: ctypes.c_uint32, 8: ctypes.c_uint64}


def _load(addr: int, size: int) -> int:
    return _READERS[size].from_address(addr).value


def _store(addr: int, size: int, val: int) -> None:
    _READERS[size].from_address(addr).value = val & ((1 << (size * 8)) - 1)


def interpret(program: isa.Program, ctx: ExecutionContext,
              helpers: HelperRegistry) -> int:
    """Reference interpreter; returns r0 at the final EXIT."""
    insns = program.instructions
    n = len(insns)
    wide = program.wide_imm_map
    regs = ctx.registers
    budget = ctx.instruction_budget
    sfi = ctx.sfi
    kit = native.atomic_kit()
    frames: list[tuple[int, int, int, int, int, int]] = []

    def mem_check(pc, addr, size, write):
        if not ctx.check(addr, size, write):
            raise SfiViolation(pc, addr, size, write)

    pc = 0
    while True:
        if pc >= n:
            raise ExecError(f"pc {pc} ran off the program end")
        budget -= 1
        if budget < 0:
            raise BudgetExhausted(
                f"instruction budget {ctx.instruction_budget} exhausted")
        insn = insns[pc]
        op = insn.opcode
        cls = op & 0x07

        if cls == isa.CLS_ALU64 or cls == isa.CLS_ALU:
            is64 = cls == isa.CLS_ALU64
            mask = U64 if is64 else U32
            aop = op & 0xF0
            d = insn.dst
            if aop == isa.ALU_END:
                v = regs[d]
                w = insn.imm
                if op & isa.SRC_X:  # to big-endian: byte swap within width
                    v &= (1 << w) - 1
                    regs[d] = int.from_bytes(v.to_bytes(w // 8, "little"), "big")
                else:  # to little-endian on a little-endian host: truncate
                    regs[d] = v & ((1 << w) - 1)
                pc += 1
                continue
            if aop == isa.ALU_NEG:
                regs[d] = (-regs[d]) & mask
                pc += 1
                continue
            b = regs[insn.src] if op & isa.SRC_X else insn.imm & mask
            if not is64:
                b &= U32
            a = regs[d] & mask
            if aop == isa.ALU_MOV:
                r = b
            elif aop == isa.ALU_ADD:
                r = a + b
            elif aop == isa.ALU_SUB:
                r = a - b
            elif aop == isa.ALU_MUL:
                r = a * b
            elif aop == isa.ALU_DIV:
                r = a // b if b else 0
            elif aop == isa.ALU_MOD:
                r = a % b if b else a
            elif aop == isa.ALU_OR:
                r = a | b
            elif aop == isa.ALU_AND:
                r = a & b
            elif aop == isa.ALU_XOR:
                r = a ^ b
            elif aop == isa.ALU_LSH:
                r = a << (b & (63 if is64 else 31))
            elif aop == isa.ALU_RSH:
                r = a >> (b & (63 if is64 else 31))
            elif aop == isa.ALU_ARSH:
                sh = b & (63 if is64 else 31)
                r = (_s64(a) if is64 else _s32(a)) >> sh
            else:
                raise ExecError(f"pc {pc}: ALU op {aop:#x}")
            regs[d] = r & mask
            pc += 1
            continue

        if cls == isa.CLS_LDX:
            size = isa.SIZE_BYTES[op & 0x18]
            addr = (regs[insn.src] + insn.offset) & U64
            if sfi:
                mem_check(pc, addr, size, False)
            regs[insn.dst] = _load(addr, size)
            pc += 1
            continue

        if cls == isa.CLS_STX or cls == isa.CLS_ST:
            size = isa.SIZE_BYTES[op & 0x18]
            addr = (regs[insn.dst] + insn.offset) & U64
            if (op & 0xE0) == isa.MODE_ATOMIC:
                if sfi:
                    mem_check(pc, addr, size, True)
                code = insn.imm & 0xFF
                srcv = regs[insn.src] & (U64 if size == 8 else U32)
                old = _atomic_op(kit, addr, size, code, srcv, regs)
                if code & isa.ATOMIC_FETCH and code not in (isa.ATOMIC_XCHG,
                                                            isa.ATOMIC_CMPXCHG):
                    regs[insn.src] = old
                elif code == isa.ATOMIC_XCHG:
                    regs[insn.src] = old
                elif code == isa.ATOMIC_CMPXCHG:
                    regs[0] = old
                pc += 1
                continue
            if sfi:
                mem_check(pc, addr, size, True)
            val = regs[insn.src] if cls == isa.CLS_STX else insn.imm
            _store(addr, size, val)
            pc += 1
            continue

        if cls == isa.CLS_JMP or cls == isa.CLS_JMP32:
            if op == isa.OP_EXIT:
                if not frames:
                    return regs[0]
                r6, r7, r8, r9, r10, ret_pc = frames.pop()
                regs[6], regs[7], regs[8], regs[9], regs[10] = r6, r7, r8, r9, r10
                pc = ret_pc
                continue
            if op == isa.OP_CALL:
                if insn.src == 1:
                    if len(frames) >= MAX_CALL_DEPTH - 1:
                        raise ExecError(f"pc {pc}: call depth limit")
                    frames.append((regs[6], regs[7], regs[8], regs[9],
                                   regs[10], pc + 1))
                    regs[10] -= STACK_FRAME
                    pc = pc + insn.imm + 1
                    continue
                fn = helpers.get(insn.imm)
                regs[0] = fn(regs[1], regs[2], regs[3], regs[4], regs[5]) & U64
                pc += 1
                continue
            if op == isa.OP_JA:
                pc += insn.offset + 1
                continue
            is64 = cls == isa.CLS_JMP
            a = regs[insn.dst]
            b = regs[insn.src] if op & isa.SRC_X else insn.imm & U64
            if not is64:
                a &= U32
                b &= U32
            else:
                b &= U64
            jop = op & 0xF0
            if jop == isa.JMP_JEQ:
                taken = a == b
            elif jop == isa.JMP_JNE:
                taken = a != b
            elif jop == isa.JMP_JGT:
                taken = a > b
            elif jop == isa.JMP_JGE:
                taken = a >= b
            elif jop == isa.JMP_JLT:
                taken = a < b
            elif jop == isa.JMP_JLE:
                taken = a <= b
            elif jop == isa.JMP_JSET:
                taken = bool(a & b)
            else:
                sa = _s64(a) if is64 else _s32(a)
                sb = _s64(b) if is64 else _s32(b)
                if jop == isa.JMP_JSGT:
                    taken = sa > sb
                elif jop == isa.JMP_JSGE:
                    taken = sa >= sb
                elif jop == isa.JMP_JSLT:
                    taken = sa < sb
                elif jop == isa.JMP_JSLE:
                    taken = sa <= sb
                else:
                    raise ExecError(f"pc {pc}: jump op {jop:#x}")
            pc += insn.offset + 1 if taken else 1
            continue

        if op == isa.OP_LDDW:
            regs[insn.dst] = program.imm64(pc)
            pc += 2
            continue

        raise ExecError(f"pc {pc}: opcode {op:#x}")


_atomic_fallback_lock = threading.Lock()


def _atomic_op(kit, addr: int, size: int, code: int, srcv: int,
               regs: list[int]) -> int:
    base = code & ~isa.ATOMIC_FETCH
    if kit is None:
        with _atomic_fallback_lock:
            old = _load(addr, size)
            if code == isa.ATOMIC_XCHG:
                _store(addr, size, srcv)
            elif code == isa.ATOMIC_CMPXCHG:
                if old == (regs[0] & ((1 << (size * 8)) - 1)):
                    _store(addr, size, srcv)
            elif base == isa.ATOMIC_ADD:
                _store(addr, size, old + srcv)
            elif base == isa.ATOMIC_OR:
                _store(addr, size, old | srcv)
            elif base == isa.ATOMIC_AND:
                _store(addr, size, old & srcv)
            elif base == isa.ATOMIC_XOR:
                _store(addr, size, old ^ srcv)
            else:
                raise ExecError(f"atomic op {code:#x}")
            return old
    if code == isa.ATOMIC_XCHG:
        return kit.xchg_u64(addr, srcv) if size == 8 else kit.xchg_u32(addr, srcv)
    if code == isa.ATOMIC_CMPXCHG:
        expected = regs[0] & ((1 << (size * 8)) - 1)
        cas = kit.cas_u64 if size == 8 else kit.cas_u32
        return cas(addr, expected, srcv)
    if base == isa.ATOMIC_ADD:
        return kit.xadd_u64(addr, srcv) if size == 8 else kit.xadd_u32(addr, srcv)
    if base == isa.ATOMIC_OR:
        return kit.or_u64(addr, srcv) if size == 8 else kit.or_u32(addr, srcv)
    if base == isa.ATOMIC_AND:
        return kit.and_u64(addr, srcv) if size == 8 else kit.and_u32(addr, srcv)
    if base == isa.ATOMIC_XOR:
        return kit.xor_u64(addr, srcv) if size == 8 else kit.xor_u32(addr, srcv)
    raise ExecError(f"atomic op {code:#x}")


_jit_backend = None


def set_jit_backend(backend) -> None:
    """backend.compile(program, helpers) -> object with .entry(r1..r5) and
    .address, or None when the program is outside what it supports."""
    global _jit_backend
    _jit_backend = backend


def jit_backend():
    return _jit_backend


def execute(program: isa.Program, ctx: ExecutionContext,
            helpers: HelperRegistry, engine: str = "auto") -> int:
    """Run a verified program and return r0.

    engine: "interp", "jit" (error if the program is not JIT-eligible),
    or "auto" (JIT when possible and SFI checks are off).
    """
    if engine not in ("auto", "interp", "jit"):
        raise ValueError(f"unknown engine {engine!r}")
    if engine in ("auto", "jit") and _jit_backend is not None:
        compiled = _jit_backend.compile(program, helpers)
        if compiled is not None and not ctx.sfi:
            return compiled.entry(*ctx.registers[1:6]) & U64
        if engine == "jit":
            if compiled is None:
                raise ExecError("program not eligible for the JIT engine")
            raise ExecError("JIT engine runs without SFI; disable it first")
    elif engine == "jit":
        raise ExecError("no JIT backend registered")
    return interpret(program, ctx, helpers)
