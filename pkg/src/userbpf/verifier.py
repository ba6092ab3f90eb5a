"""Static pre-execution validation: accepted programs cannot fault the host.

The analysis is a depth-first abstract interpretation over explicit
register states, far simpler than the kernel's: precision gaps resolve to
rejection in strict mode and to deferred runtime (SFI) checks in
permissive-sfi mode.

Register lattice:

    uninit                      read rejected
    scalar(c)                   c is a known constant or None
    ctx(off)                    pointer into the entry context region
    stack(off)                  r10-relative, off in [-512, 0]
    map_handle(h)               relocated LDDW map reference
    map_or_null(h, id)          result of map_lookup before the null check
    map_value(h, off)           null-checked map value pointer
    rb_or_null(sz, id)          result of ringbuf_reserve
    rb_mem(sz, off, ref)        null-checked reserved ring record
    mem(sz, writable, off)      loader-registered data region (rodata)
    unknown_ptr                 pointer broken by non-constant arithmetic

Constant tracking doubles as the loop-bound proof: a loop whose control
state changes by constants each iteration unrolls into finitely many
distinct states and the walk terminates; a back-edge that reproduces an
already-live state is an unproven loop and rejects in strict mode.

Rejection rule ids (stable strings):

    bad-jump    jump/call target outside the program or into a wide pair
    no-exit     some path falls off the end
    uninit-read register (incl. r0 at exit) read before written
    frame-write r10 used as a destination
    stack-oob   r10-relative access outside [-512, 0)
    bad-mem     unsafe load/store (null, out of bounds, bad context write)
    ptr-arith   dereference of a pointer broken by unprovable arithmetic
    bad-call    unknown helper id, bad helper args, or call depth > 8
    div-zero    division/modulo by a literal zero immediate
    bad-map-ref LDDW map reference without a relocated handle
    loop        back-edge without a provable bound (strict only)
    budget      path length or analysis state count beyond max_instructions
    ref-leak    ringbuf reservation not submitted or discarded on some path
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import isa
from .maps import MapDescriptor

STACK_SIZE = 512
MAX_CALL_DEPTH = 8

DEFAULT_HELPER_IDS = frozenset({1, 2, 3, 5, 6, 14, 112, 131, 132, 133})

HELPER_MAP_LOOKUP = 1
HELPER_MAP_UPDATE = 2
HELPER_MAP_DELETE = 3
HELPER_KTIME = 5
HELPER_PRINTK = 6
HELPER_PID_TGID = 14
HELPER_PROBE_READ_USER = 112
HELPER_RINGBUF_RESERVE = 131
HELPER_RINGBUF_SUBMIT = 132
HELPER_RINGBUF_DISCARD = 133

STRICT = "strict"
PERMISSIVE = "permissive-sfi"

U64 = 0xFFFFFFFFFFFFFFFF
U32 = 0xFFFFFFFF


@dataclass(frozen=True)
class ContextModel:
    """Shape of r1 at entry: scalar arguments or a pointer to a region."""
    kind: str = "scalars"  # "scalars" | "region"
    size: int = 0
    writable: tuple[tuple[int, int], ...] = ()  # (start, end) half-open


@dataclass
class VerifyConfig:
    max_instructions: int = 65536
    allow_helper_ids: frozenset[int] = DEFAULT_HELPER_IDS
    stack_size: int = STACK_SIZE
    strictness: str = STRICT
    context: ContextModel = field(default_factory=ContextModel)
    maps: dict[int, MapDescriptor] = field(default_factory=dict)

    def __post_init__(self):
        if self.stack_size != STACK_SIZE:
            raise ValueError("stack size is fixed at 512 bytes")
        if self.max_instructions < 1:
            raise ValueError("max_instructions must be positive")
        if self.strictness not in (STRICT, PERMISSIVE):
            raise ValueError(f"unknown strictness {self.strictness!r}")


@dataclass
class VerifyReport:
    verdict: str  # "accept" | "reject"
    rejections: list[tuple[int, str, str]]
    registers_summary: dict[int, tuple[str, ...]] = field(default_factory=dict)

    @property
    def accepted(self) -> bool:
        return self.verdict == "accept"


class _Reject(Exception):
    def __init__(self, pc: int, rule: str, msg: str):
        self.pc, self.rule, self.msg = pc, rule, msg
        super().__init__(f"{pc}: {rule}: {msg}")


UNINIT = ("uninit",)
UNKNOWN = ("scalar", None)
UNKNOWN_PTR = ("unknown_ptr",)

_POINTER_KINDS = frozenset({"ctx", "stack", "map_value", "rb_mem", "mem"})


def _s(v: int, bits: int) -> int:
    v &= (1 << bits) - 1
    return v - (1 << bits) if v >= (1 << (bits - 1)) else v


def _state_str(st: tuple) -> str:
    kind = st[0]
    if kind == "scalar":
        return "scalar" if st[1] is None else f"scalar={st[1]}"
    return kind + ("" if len(st) == 1 else str(st[1:]))


class _Frame:
    __slots__ = ("regs", "stack", "ret_pc")

    def __init__(self, regs, stack, ret_pc):
        self.regs = regs        # tuple of 10 states, r0..r9
        self.stack = stack      # immutable dict items: ((off, state), ...)
        self.ret_pc = ret_pc

    def key(self):
        return (self.regs, self.stack, self.ret_pc)


class _Analysis:
    def __init__(self, program: isa.Program, config: VerifyConfig):
        self.p = program
        self.cfg = config
        self.n = len(program.instructions)
        self.strict = config.strictness == STRICT
        self.summary: dict[int, tuple[str, ...]] = {}
        self.next_id = 1
        self.states_explored = 0

    # -- helpers over the abstract state -------------------------------------

    def fresh_id(self) -> int:
        self.next_id += 1
        return self.next_id

    def read_reg(self, frame: _Frame, r: int, pc: int) -> tuple:
        if r == 10:
            return ("stack", 0)
        st = frame.regs[r]
        if st == UNINIT:
            raise _Reject(pc, "uninit-read", f"r{r} read before written")
        return st

    def write_reg(self, frame: _Frame, r: int, st: tuple, pc: int) -> _Frame:
        if r == 10:
            raise _Reject(pc, "frame-write", "r10 is read-only")
        regs = frame.regs[:r] + (st,) + frame.regs[r + 1:]
        return _Frame(regs, frame.stack, frame.ret_pc)

    def stack_get(self, frame: _Frame, off: int) -> tuple | None:
        for o, st in frame.stack:
            if o == off:
                return st
        return None

    def stack_put(self, frame: _Frame, off: int, size: int,
                  st: tuple | None) -> _Frame:
        kept = tuple((o, s) for o, s in frame.stack
                     if o + 8 <= off or o >= off + size)
        if st is not None and size == 8 and off % 8 == 0:
            kept = kept + ((off, st),)
        return _Frame(frame.regs, tuple(sorted(kept)), frame.ret_pc)

    # -- memory access validation ---------------------------------------------

    def check_access(self, pc: int, st: tuple, off: int, size: int,
                     write: bool) -> None:
        kind = st[0]
        if kind == "stack":
            lo = st[1] + off
            if lo < -STACK_SIZE or lo + size > 0:
                raise _Reject(pc, "stack-oob",
                              f"stack access at r10{lo:+d} size {size}")
            return
        if kind == "ctx":
            if self.cfg.context.kind != "region":
                raise _Reject(pc, "bad-mem", "no context region in this model")
            lo = st[1] + off
            if lo < 0 or lo + size > self.cfg.context.size:
                raise _Reject(pc, "bad-mem",
                              f"context access at {lo} size {size}")
            if write and not any(a <= lo and lo + size <= b
                                 for a, b in self.cfg.context.writable):
                raise _Reject(pc, "bad-mem", f"context write at {lo}")
            return
        if kind == "map_value":
            desc = self.cfg.maps.get(st[1])
            if desc is None:
                raise _Reject(pc, "bad-map-ref", f"unknown map handle {st[1]}")
            lo = st[2] + off
            if lo < 0 or lo + size > desc.value_size:
                raise _Reject(pc, "bad-mem",
                              f"map value access at {lo} size {size}")
            return
        if kind == "rb_mem":
            lo = st[2] + off
            if lo < 0 or lo + size > st[1]:
                raise _Reject(pc, "bad-mem",
                              f"ring record access at {lo} size {size}")
            return
        if kind == "mem":
            lo = st[3] + off
            if lo < 0 or lo + size > st[1]:
                raise _Reject(pc, "bad-mem",
                              f"region access at {lo} size {size}")
            if write and not st[2]:
                raise _Reject(pc, "bad-mem", "write to read-only region")
            return
        if kind in ("map_or_null", "rb_or_null"):
            if self.strict:
                raise _Reject(pc, "bad-mem",
                              "pointer may be null; check it first")
            return  # SFI rejects the null at runtime (page 0 is never mapped)
        if kind == "unknown_ptr":
            if self.strict:
                raise _Reject(pc, "ptr-arith",
                              "dereference of unprovable pointer arithmetic")
            return
        if kind in ("scalar", "map_handle"):
            if self.strict:
                raise _Reject(pc, "bad-mem", f"dereference of {kind}")
            return
        raise _Reject(pc, "bad-mem", f"dereference of {kind}")

    def require_mem_arg(self, pc: int, st: tuple, size: int,
                        write: bool, what: str) -> None:
        try:
            self.check_access(pc, st, 0, size, write)
        except _Reject as r:
            raise _Reject(pc, "bad-call", f"{what}: {r.msg}")

    # -- ALU ------------------------------------------------------------------

    def alu(self, pc: int, frame: _Frame, insn: isa.Instruction,
            is64: bool) -> _Frame:
        op = insn.op
        if op == isa.ALU_END:
            st = self.read_reg(frame, insn.dst, pc)
            val = None
            if st[0] == "scalar" and st[1] is not None and not insn.uses_reg_source:
                # to-LE on a little-endian target truncates
                val = st[1] & ((1 << insn.imm) - 1)
            return self.write_reg(frame, insn.dst, ("scalar", val), pc)
        if op == isa.ALU_NEG:
            st = self.read_reg(frame, insn.dst, pc)
            val = None
            if st[0] == "scalar" and st[1] is not None:
                val = (-st[1]) & (U64 if is64 else U32)
            return self.write_reg(frame, insn.dst, ("scalar", val), pc)

        if insn.uses_reg_source:
            src = self.read_reg(frame, insn.src, pc)
        else:
            # ALU64 immediates sign-extend to 64 bits
            src = ("scalar", insn.imm & (U64 if is64 else U32))
        if op == isa.ALU_MOV:
            if not insn.uses_reg_source:
                return self.write_reg(frame, insn.dst,
                                      ("scalar", insn.imm & (U64 if is64 else U32)),
                                      pc)
            if not is64:
                val = src[1] & U32 if src[0] == "scalar" and src[1] is not None else None
                return self.write_reg(frame, insn.dst, ("scalar", val), pc)
            return self.write_reg(frame, insn.dst, src, pc)

        if op in (isa.ALU_DIV, isa.ALU_MOD) and not insn.uses_reg_source \
                and insn.imm == 0:
            raise _Reject(pc, "div-zero", "literal zero divisor")

        dst = self.read_reg(frame, insn.dst, pc)

        # pointer +/- constant keeps the pointer; anything else decays
        if is64 and op in (isa.ALU_ADD, isa.ALU_SUB):
            res = self._pointer_arith(dst, src, op == isa.ALU_ADD)
            if res is not None:
                return self.write_reg(frame, insn.dst, res, pc)

        val = None
        if dst[0] == "scalar" and src[0] == "scalar" \
                and dst[1] is not None and src[1] is not None:
            val = self._const_fold(op, dst[1], src[1], is64)
        if dst[0] in _POINTER_KINDS or src[0] in _POINTER_KINDS or \
                dst[0] == "unknown_ptr" or src[0] == "unknown_ptr":
            if dst[0] in _POINTER_KINDS and src[0] == dst[0] and op == isa.ALU_SUB:
                pass  # ptr - ptr of same kind: plain scalar
            elif is64 and op in (isa.ALU_ADD, isa.ALU_SUB):
                return self.write_reg(frame, insn.dst, UNKNOWN_PTR, pc)
        return self.write_reg(frame, insn.dst, ("scalar", val), pc)

    @staticmethod
    def _pointer_arith(dst: tuple, src: tuple, is_add: bool) -> tuple | None:
        ptr, delta = None, None
        if dst[0] in _POINTER_KINDS and src[0] == "scalar":
            if src[1] is None:
                return None
            ptr, delta = dst, src[1] if is_add else -src[1]
        elif is_add and src[0] in _POINTER_KINDS and dst[0] == "scalar":
            if dst[1] is None:
                return None
            ptr, delta = src, dst[1]
        if ptr is None:
            return None
        delta = _s(delta, 64)
        off_idx = {"ctx": 1, "stack": 1, "map_value": 2, "rb_mem": 2, "mem": 3}
        i = off_idx[ptr[0]]
        return ptr[:i] + (ptr[i] + delta,) + ptr[i + 1:]

    @staticmethod
    def _const_fold(op: int, a: int, b: int, is64: bool) -> int | None:
        mask = U64 if is64 else U32
        bits = 64 if is64 else 32
        a &= mask
        b &= mask
        if op == isa.ALU_ADD:
            return (a + b) & mask
        if op == isa.ALU_SUB:
            return (a - b) & mask
        if op == isa.ALU_MUL:
            return (a * b) & mask
        if op == isa.ALU_DIV:
            return (a // b) & mask if b else 0
        if op == isa.ALU_MOD:
            return (a % b) & mask if b else a
        if op == isa.ALU_OR:
            return a | b
        if op == isa.ALU_AND:
            return a & b
        if op == isa.ALU_XOR:
            return a ^ b
        if op == isa.ALU_LSH:
            return (a << (b & (bits - 1))) & mask
        if op == isa.ALU_RSH:
            return (a >> (b & (bits - 1))) & mask
        if op == isa.ALU_ARSH:
            return (_s(a, bits) >> (b & (bits - 1))) & mask
        return None

    # -- branches -------------------------------------------------------------

    @staticmethod
    def _cmp(op: int, a: int, b: int, bits: int) -> bool:
        ua, ub = a & ((1 << bits) - 1), b & ((1 << bits) - 1)
        sa, sb = _s(ua, bits), _s(ub, bits)
        return {
            isa.JMP_JEQ: ua == ub, isa.JMP_JNE: ua != ub,
            isa.JMP_JGT: ua > ub, isa.JMP_JGE: ua >= ub,
            isa.JMP_JLT: ua < ub, isa.JMP_JLE: ua <= ub,
            isa.JMP_JSGT: sa > sb, isa.JMP_JSGE: sa >= sb,
            isa.JMP_JSLT: sa < sb, isa.JMP_JSLE: sa <= sb,
            isa.JMP_JSET: bool(ua & ub),
        }[op]

    def _refine_null(self, frame: _Frame, ident: int, null: bool) -> _Frame:
        def convert(st: tuple) -> tuple:
            if st[0] == "map_or_null" and st[2] == ident:
                return ("scalar", 0) if null else ("map_value", st[1], 0)
            if st[0] == "rb_or_null" and st[2] == ident:
                return ("scalar", 0) if null else ("rb_mem", st[1], 0, st[2])
            return st

        regs = tuple(convert(s) for s in frame.regs)
        stack = tuple((o, convert(s)) for o, s in frame.stack)
        return _Frame(regs, stack, frame.ret_pc)

    # -- call effects ----------------------------------------------------------

    def helper_call(self, pc: int, frame: _Frame, imm: int,
                    refs: frozenset) -> tuple[_Frame, frozenset]:
        hid = imm
        if hid not in self.cfg.allow_helper_ids:
            raise _Reject(pc, "bad-call", f"helper id {hid} not allowed")

        def arg(i):
            return self.read_reg(frame, i, pc)

        result: tuple = UNKNOWN
        if hid in (HELPER_MAP_LOOKUP, HELPER_MAP_UPDATE, HELPER_MAP_DELETE):
            m = arg(1)
            if m[0] != "map_handle":
                raise _Reject(pc, "bad-call", "r1 must be a map reference")
            desc = self.cfg.maps.get(m[1])
            if desc is None:
                raise _Reject(pc, "bad-map-ref", f"unknown map handle {m[1]}")
            self.require_mem_arg(pc, arg(2), max(desc.key_size, 1), False, "key")
            if hid == HELPER_MAP_LOOKUP:
                result = ("map_or_null", m[1], self.fresh_id())
            elif hid == HELPER_MAP_UPDATE:
                self.require_mem_arg(pc, arg(3), max(desc.value_size, 1),
                                     False, "value")
                arg(4)
        elif hid == HELPER_PRINTK:
            fmt, size = arg(1), arg(2)
            if size[0] == "scalar" and size[1] is not None and size[1] > 0:
                self.require_mem_arg(pc, fmt, size[1], False, "format")
            elif self.strict:
                raise _Reject(pc, "bad-call", "format size must be constant")
        elif hid == HELPER_PROBE_READ_USER:
            dst, size = arg(1), arg(2)
            if size[0] == "scalar" and size[1] is not None:
                if size[1] > 0:
                    self.require_mem_arg(pc, dst, size[1], True, "destination")
            elif self.strict:
                raise _Reject(pc, "bad-call", "read size must be constant")
            arg(3)
        elif hid == HELPER_RINGBUF_RESERVE:
            m, size = arg(1), arg(2)
            if m[0] != "map_handle":
                raise _Reject(pc, "bad-call", "r1 must be a map reference")
            desc = self.cfg.maps.get(m[1])
            if desc is None:
                raise _Reject(pc, "bad-map-ref", f"unknown map handle {m[1]}")
            if desc.map_type != "ringbuf":
                raise _Reject(pc, "bad-call", "reserve needs a ring buffer")
            if size[0] != "scalar" or size[1] is None:
                raise _Reject(pc, "bad-call", "reserve size must be constant")
            ident = self.fresh_id()
            refs = refs | {ident}
            result = ("rb_or_null", size[1], ident)
        elif hid in (HELPER_RINGBUF_SUBMIT, HELPER_RINGBUF_DISCARD):
            rec = arg(1)
            if rec[0] != "rb_mem":
                raise _Reject(pc, "bad-call",
                              "submit/discard needs a reserved record")
            if rec[3] not in refs:
                raise _Reject(pc, "bad-call", "record already released")
            refs = refs - {rec[3]}
            result = ("scalar", 0)
        elif hid in (HELPER_KTIME, HELPER_PID_TGID):
            pass
        # FFI ids and remaining floor helpers take opaque u64 arguments

        regs = (result,) + tuple(UNINIT for _ in range(5)) + frame.regs[6:]
        return _Frame(regs, frame.stack, frame.ret_pc), refs


def _validate_targets(p: isa.Program, cfg: VerifyConfig) -> None:
    n = len(p.instructions)
    second_slots = {i + 1 for i in p.wide_imm_map}
    if n > cfg.max_instructions:
        raise _Reject(0, "budget",
                      f"{n} instructions exceed limit {cfg.max_instructions}")
    for pc, insn in enumerate(p.instructions):
        if pc in second_slots:
            continue
        cls = insn.cls
        if cls in (isa.CLS_JMP, isa.CLS_JMP32):
            if insn.opcode == isa.OP_EXIT:
                continue
            if insn.opcode == isa.OP_CALL:
                if insn.src == 1:
                    t = pc + insn.imm + 1
                    if not 0 <= t < n or t in second_slots:
                        raise _Reject(pc, "bad-jump",
                                      f"local call target {t} invalid")
                continue
            t = pc + insn.offset + 1
            if not 0 <= t < n or t in second_slots:
                raise _Reject(pc, "bad-jump", f"jump target {t} invalid")


def verify(program: isa.Program, config: VerifyConfig | None = None) -> VerifyReport:
    """Walk every abstract path; accept only if none violates a rule."""
    cfg = config or VerifyConfig()
    a = _Analysis(program, cfg)
    try:
        _validate_targets(program, cfg)
        _walk(a)
    except _Reject as r:
        return VerifyReport("reject", [(r.pc, r.rule, r.msg)], a.summary)
    return VerifyReport("accept", [], a.summary)


def _entry_frame(cfg: VerifyConfig) -> _Frame:
    if cfg.context.kind == "region":
        r1: tuple = ("ctx", 0)
        rest = tuple(UNINIT for _ in range(4))
    else:
        r1 = UNKNOWN
        rest = tuple(UNKNOWN for _ in range(4))
    regs = (UNINIT, r1) + rest + tuple(UNINIT for _ in range(4))
    return _Frame(regs, (), None)


# After this many walks through one instruction, constant tracking stops
# for states at that pc so unbounded accumulator loops converge onto a
# detectable cycle instead of unrolling forever.  Provable loops below
# this trip count still unroll exactly.
WIDEN_AFTER = 2048


def _widen_state(st: tuple) -> tuple:
    return UNKNOWN if st[0] == "scalar" and st[1] is not None else st


def _widen_frame(f: _Frame) -> _Frame:
    return _Frame(tuple(_widen_state(s) for s in f.regs),
                  tuple((o, _widen_state(s)) for o, s in f.stack),
                  f.ret_pc)


def _walk(a: _Analysis) -> None:
    cfg = a.cfg

    # Iterative DFS with tri-state coloring: a state whose exploration is
    # still open is exactly an ancestor on the current path, so meeting an
    # in-progress state again is an abstract cycle (an unproven loop).
    IN_PROGRESS, DONE = 1, 2
    colors: dict = {}
    visits: dict[int, int] = {}

    def state_key(pc, frames, refs):
        return (pc, tuple(f.key() for f in frames), refs)

    stack: list[tuple] = [("pre", 0, (_entry_frame(cfg),), frozenset(), 0)]
    while stack:
        entry = stack.pop()
        if entry[0] == "post":
            colors[entry[1]] = DONE
            continue
        _, pc, frames, refs, depth = entry

        visits[pc] = visits.get(pc, 0) + 1
        if visits[pc] > WIDEN_AFTER:
            frames = tuple(_widen_frame(f) for f in frames)
        key = state_key(pc, frames, refs)
        color = colors.get(key)
        if color == DONE:
            continue
        if color == IN_PROGRESS:
            if a.strict:
                raise _Reject(pc, "loop",
                              "back-edge without a provable bound")
            continue
        colors[key] = IN_PROGRESS
        stack.append(("post", key))

        a.states_explored += 1
        if a.states_explored > cfg.max_instructions * 8 or \
                depth > cfg.max_instructions:
            raise _Reject(pc, "budget",
                          "analysis exceeded the instruction budget")

        for npc, nframes, nrefs in _step(a, pc, frames, refs):
            stack.append(("pre", npc, nframes, nrefs, depth + 1))


def _step(a: _Analysis, pc, frames, refs):
    """Execute one abstract instruction; yield successor states."""
    p, cfg = a.p, a.cfg
    insns = p.instructions
    if pc >= a.n:
        raise _Reject(a.n - 1, "no-exit", "execution falls off the end")
    frame = frames[-1]
    if pc not in a.summary:
        a.summary[pc] = tuple(_state_str(s) for s in frame.regs) + ("stack",)
    insn = insns[pc]
    cls = insn.cls

    if insn.opcode == isa.OP_LDDW:
        if insn.src == isa.LDDW_MAP_REF:
            h = p.map_refs.get(pc)
            if h is None or h not in cfg.maps:
                raise _Reject(pc, "bad-map-ref",
                              "map reference was never relocated")
            st = ("map_handle", h)
        elif insn.src == isa.LDDW_MEM_REF:
            ref = p.region_refs.get(pc)
            if ref is None:
                raise _Reject(pc, "bad-map-ref",
                              "region reference was never relocated")
            st = ("mem", ref.size, ref.writable, 0)
        else:
            st = ("scalar", p.imm64(pc))
        yield pc + 2, frames[:-1] + (a.write_reg(frame, insn.dst, st, pc),), refs
        return

    if cls in (isa.CLS_ALU, isa.CLS_ALU64):
        nf = a.alu(pc, frame, insn, cls == isa.CLS_ALU64)
        yield pc + 1, frames[:-1] + (nf,), refs
        return

    if cls == isa.CLS_LDX:
        size = isa.SIZE_BYTES[insn.opcode & 0x18]
        base = a.read_reg(frame, insn.src, pc)
        a.check_access(pc, base, insn.offset, size, write=False)
        loaded: tuple = UNKNOWN
        if base[0] == "stack" and size == 8:
            spilled = a.stack_get(frame, base[1] + insn.offset)
            if spilled is not None:
                loaded = spilled
        yield pc + 1, frames[:-1] + (a.write_reg(frame, insn.dst, loaded, pc),), refs
        return

    if cls in (isa.CLS_ST, isa.CLS_STX):
        mode = insn.opcode & 0xE0
        size = isa.SIZE_BYTES[insn.opcode & 0x18]
        base = a.read_reg(frame, insn.dst, pc)
        if mode == isa.MODE_ATOMIC:
            code = insn.imm & 0xFF
            if code not in isa.ATOMIC_OPS:
                raise _Reject(pc, "bad-mem", f"atomic op {insn.imm:#x} unknown")
            a.check_access(pc, base, insn.offset, size, write=True)
            a.read_reg(frame, insn.src, pc)
            nf = frame
            if code & isa.ATOMIC_FETCH and code != isa.ATOMIC_CMPXCHG:
                nf = a.write_reg(nf, insn.src, UNKNOWN, pc)
            if code == isa.ATOMIC_XCHG:
                nf = a.write_reg(nf, insn.src, UNKNOWN, pc)
            if code == isa.ATOMIC_CMPXCHG:
                a.read_reg(nf, 0, pc)
                nf = a.write_reg(nf, 0, UNKNOWN, pc)
            yield pc + 1, frames[:-1] + (nf,), refs
            return
        a.check_access(pc, base, insn.offset, size, write=True)
        nf = frame
        if cls == isa.CLS_STX:
            val = a.read_reg(frame, insn.src, pc)
        else:
            val = ("scalar", insn.imm)
        if base[0] == "stack":
            nf = a.stack_put(frame, base[1] + insn.offset, size,
                             val if size == 8 else None)
        yield pc + 1, frames[:-1] + (nf,), refs
        return

    # jumps
    if insn.opcode == isa.OP_EXIT:
        f = frames[-1]
        if f.regs[0] == UNINIT:
            raise _Reject(pc, "uninit-read", "r0 unset at exit")
        if f.ret_pc is None:
            if refs:
                raise _Reject(pc, "ref-leak",
                              "ring reservation live at exit")
            return  # program exits: path done
        caller = frames[-2]
        regs = (f.regs[0],) + tuple(UNINIT for _ in range(5)) + caller.regs[6:]
        nf = _Frame(regs, caller.stack, caller.ret_pc)
        yield f.ret_pc, frames[:-2] + (nf,), refs
        return

    if insn.opcode == isa.OP_CALL:
        if insn.src == 1:
            if len(frames) >= MAX_CALL_DEPTH:
                raise _Reject(pc, "bad-call",
                              f"call depth exceeds {MAX_CALL_DEPTH}")
            target = pc + insn.imm + 1
            regs = (UNINIT,) + frame.regs[1:6] + tuple(UNINIT for _ in range(4))
            callee = _Frame(regs, (), pc + 1)
            yield target, frames + (callee,), refs
            return
        nf, nrefs = a.helper_call(pc, frame, insn.imm, refs)
        yield pc + 1, frames[:-1] + (nf,), nrefs
        return

    if insn.opcode == isa.OP_JA:
        yield pc + insn.offset + 1, frames, refs
        return

    # conditional jump
    bits = 64 if cls == isa.CLS_JMP else 32
    dst = a.read_reg(frame, insn.dst, pc)
    if insn.uses_reg_source:
        src = a.read_reg(frame, insn.src, pc)
    else:
        src = ("scalar", insn.imm)
    taken_pc = pc + insn.offset + 1

    if dst[0] == "scalar" and src[0] == "scalar" \
            and dst[1] is not None and src[1] is not None:
        taken = a._cmp(insn.op, dst[1], src[1], bits)
        yield (taken_pc if taken else pc + 1), frames, refs
        return

    # null-check refinement on == 0 / != 0 against or-null pointers; a
    # reservation proven null was never made, so its ref dies with it
    if dst[0] in ("map_or_null", "rb_or_null") and src == ("scalar", 0) \
            and insn.op in (isa.JMP_JEQ, isa.JMP_JNE) and bits == 64:
        ident = dst[2]
        null_first = insn.op == isa.JMP_JEQ
        f_taken = a._refine_null(frame, ident, null=null_first)
        f_fall = a._refine_null(frame, ident, null=not null_first)
        refs_null = refs - {ident}
        yield taken_pc, frames[:-1] + (f_taken,), \
            refs_null if null_first else refs
        yield pc + 1, frames[:-1] + (f_fall,), \
            refs if null_first else refs_null
        return

    yield taken_pc, frames, refs
    yield pc + 1, frames, refs
