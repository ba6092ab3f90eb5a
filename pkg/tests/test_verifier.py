import pytest

from userbpf import isa
from userbpf.maps import MapDescriptor
from userbpf.verifier import (
    PERMISSIVE, STRICT, ContextModel, VerifyConfig, verify,
)

from support import (
    add, alu64, alu64_reg, atomic, call, call_local, exit_, ja, jmp, jmp_reg,
    lddw, lddw_map, ldx, mov, mov_reg, neg, prog, st, stx,
)

HASH88 = MapDescriptor("hash", 8, 8, 64, "m", "seg_m")
RING = MapDescriptor("ringbuf", 0, 0, 4096, "rb", "seg_rb")


def cfg(**kw):
    return VerifyConfig(**kw)


def accepts(p, config=None):
    rep = verify(p, config or cfg())
    assert rep.accepted, rep.rejections
    return rep


def rejects(p, rule, config=None):
    rep = verify(p, config or cfg())
    assert not rep.accepted, f"expected {rule} but program was accepted"
    got = [r for _, r, _ in rep.rejections]
    assert rule in got, f"expected {rule}, got {rep.rejections}"
    return rep


class TestBasics:
    def test_minimal_program_accepts(self):
        accepts(prog(mov(0, 1), exit_()))

    def test_missing_exit_rejects(self):
        rejects(prog(mov(0, 1)), "no-exit")

    def test_r0_unset_at_exit(self):
        rejects(prog(exit_()), "uninit-read")

    def test_uninit_register_read(self):
        rejects(prog(mov_reg(0, 7), exit_()), "uninit-read")

    def test_frame_register_is_read_only(self):
        rejects(prog(mov(10, 0), exit_()), "frame-write")
        rejects(prog(alu64(isa.ALU_ADD, 10, 8), exit_()), "frame-write")

    def test_reading_r10_is_fine(self):
        accepts(prog(mov_reg(0, 10),
                     alu64_reg(isa.ALU_SUB, 0, 10),  # ptr - ptr = scalar
                     exit_()))

    def test_div_zero_immediate(self):
        rejects(prog(mov(0, 4), alu64(isa.ALU_DIV, 0, 0), exit_()), "div-zero")
        rejects(prog(mov(0, 4), alu64(isa.ALU_MOD, 0, 0), exit_()), "div-zero")

    def test_div_by_register_is_runtime_concern(self):
        accepts(prog(mov(0, 4), mov(1, 0),
                     alu64_reg(isa.ALU_DIV, 0, 1), exit_()))


class TestJumps:
    def test_forward_jump(self):
        accepts(prog(mov(0, 0), ja(1), mov(0, 1), exit_()))

    def test_jump_out_of_range(self):
        rejects(prog(mov(0, 0), ja(5), exit_()), "bad-jump")
        rejects(prog(mov(0, 0), ja(-3), exit_()), "bad-jump")

    def test_jump_into_wide_pair(self):
        p = prog(mov(0, 0), ja(1), lddw(1, 0x1122334455667788), exit_())
        # slot 2 is the lddw, slot 3 its pseudo half: ja +1 from slot 1
        # targets slot 3
        rejects(p, "bad-jump")

    def test_both_branches_explored(self):
        # r1 is an unknown scalar at entry, so both arms are walked and the
        # taken one reads uninitialized r9
        rejects(prog(jmp(isa.JMP_JEQ, 1, 5, 2),
                     mov(0, 0),
                     exit_(),
                     mov_reg(0, 9),
                     exit_()),
                "uninit-read", cfg())

    def test_constant_branches_fold(self):
        # r1 == 5 always: the fallthrough reading uninit r9 is dead code
        accepts(prog(mov(0, 0), mov(1, 5), jmp(isa.JMP_JEQ, 1, 5, 1),
                     mov_reg(0, 9),
                     exit_()))


class TestStack:
    def test_stack_store_load(self):
        accepts(prog(mov(1, 7), stx(isa.SZ_DW, 10, 1, -8),
                     ldx(isa.SZ_DW, 0, 10, -8), exit_()))

    def test_stack_oob_low(self):
        rejects(prog(mov(1, 7), stx(isa.SZ_DW, 10, 1, -520),
                     mov(0, 0), exit_()), "stack-oob")

    def test_stack_oob_high(self):
        rejects(prog(ldx(isa.SZ_DW, 0, 10, 0), exit_()), "stack-oob")
        rejects(prog(ldx(isa.SZ_DW, 0, 10, -4), exit_()), "stack-oob")

    def test_spilled_pointer_reloads(self):
        config = cfg(context=ContextModel("region", 64), strictness=STRICT)
        accepts(prog(stx(isa.SZ_DW, 10, 1, -8),
                     ldx(isa.SZ_DW, 2, 10, -8),
                     ldx(isa.SZ_DW, 0, 2, 0),    # reload still a ctx pointer
                     exit_()), config)

    def test_overwritten_spill_decays(self):
        config = cfg(context=ContextModel("region", 64), strictness=STRICT)
        rejects(prog(stx(isa.SZ_DW, 10, 1, -8),
                     st(isa.SZ_W, 10, -8, 0),   # clobber half the slot
                     ldx(isa.SZ_DW, 2, 10, -8),
                     ldx(isa.SZ_DW, 0, 2, 0),
                     exit_()), "bad-mem", config)


class TestContext:
    def test_ctx_read_in_bounds(self):
        config = cfg(context=ContextModel("region", 16))
        accepts(prog(ldx(isa.SZ_DW, 0, 1, 8), exit_()), config)

    def test_ctx_read_out_of_bounds(self):
        config = cfg(context=ContextModel("region", 16), strictness=STRICT)
        rejects(prog(ldx(isa.SZ_DW, 0, 1, 16), exit_()), "bad-mem", config)

    def test_ctx_write_needs_window(self):
        ro = cfg(context=ContextModel("region", 16), strictness=STRICT)
        rejects(prog(mov(2, 1), stx(isa.SZ_DW, 1, 2, 0), mov(0, 0), exit_()),
                "bad-mem", ro)
        rw = cfg(context=ContextModel("region", 16, writable=((8, 16),)),
                 strictness=STRICT)
        accepts(prog(mov(2, 0), stx(isa.SZ_DW, 1, 2, 8), mov(0, 0), exit_()),
                rw)

    def test_scalar_deref_strict_vs_permissive(self):
        p = prog(ldx(isa.SZ_DW, 0, 1, 0), exit_())
        rejects(p, "bad-mem", cfg(strictness=STRICT))
        accepts(p, cfg(strictness=PERMISSIVE))


class TestMaps:
    def config(self, strictness=STRICT):
        return cfg(maps={3: HASH88, 4: RING}, strictness=strictness)

    def lookup_prog(self, deref_without_check=False):
        body = [
            mov(1, 0),
            stx(isa.SZ_DW, 10, 1, -8),
            lddw_map(1, 3),
            mov_reg(2, 10),
            add(2, -8),
            call(1),
        ]
        if deref_without_check:
            body += [ldx(isa.SZ_DW, 0, 0, 0), exit_()]
        else:
            body += [
                jmp(isa.JMP_JEQ, 0, 0, 2),
                ldx(isa.SZ_DW, 0, 0, 0),
                exit_(),
                mov(0, 0),
                exit_(),
            ]
        return prog(*body, map_refs={2: 3})

    def test_lookup_with_null_check(self):
        accepts(self.lookup_prog(), self.config())

    def test_lookup_without_null_check(self):
        rejects(self.lookup_prog(deref_without_check=True), "bad-mem",
                self.config())
        accepts(self.lookup_prog(deref_without_check=True),
                self.config(PERMISSIVE))

    def test_map_value_bounds(self):
        body = [
            mov(1, 0), stx(isa.SZ_DW, 10, 1, -8),
            lddw_map(1, 3), mov_reg(2, 10), add(2, -8), call(1),
            jmp(isa.JMP_JEQ, 0, 0, 2),
            ldx(isa.SZ_DW, 0, 0, 4),  # 4 + 8 > value_size 8
            exit_(),
            mov(0, 0), exit_(),
        ]
        rejects(prog(*body, map_refs={2: 3}), "bad-mem", self.config())

    def test_unrelocated_map_ref(self):
        rejects(prog(lddw_map(1, 3), mov(0, 0), exit_()), "bad-map-ref",
                self.config())

    def test_unknown_helper(self):
        rejects(prog(mov(1, 0), call(999), exit_()), "bad-call", self.config())

    def test_helper_needs_map_arg(self):
        rejects(prog(mov(1, 0), mov(2, 0), call(1), exit_()), "bad-call",
                self.config())

    def test_ringbuf_reserve_submit(self):
        body = [
            lddw_map(1, 4), mov(2, 16), mov(3, 0), call(131),
            jmp(isa.JMP_JEQ, 0, 0, 4),
            mov_reg(1, 0), mov(2, 0), stx(isa.SZ_DW, 1, 2, 0),
            call(132),
            mov(0, 0), exit_(),
        ]
        accepts(prog(*body, map_refs={0: 4}), self.config())

    def test_ringbuf_leak_rejected(self):
        body = [
            lddw_map(1, 4), mov(2, 16), mov(3, 0), call(131),
            mov(0, 0), exit_(),
        ]
        rejects(prog(*body, map_refs={0: 4}), "ref-leak", self.config())


class TestLoops:
    def constant_loop(self, n):
        return prog(
            mov(1, n),
            mov(0, 0),
            add(0, 1),                       # 2
            alu64(isa.ALU_SUB, 1, 1),        # 3
            jmp(isa.JMP_JNE, 1, 0, -3),      # 4 -> back to 2
            exit_(),
        )

    def test_constant_bounded_loop_strict(self):
        accepts(self.constant_loop(12), cfg(strictness=STRICT))

    def test_input_dependent_loop(self):
        p = prog(
            mov_reg(2, 1),
            mov(0, 0),
            add(0, 1),
            alu64(isa.ALU_SUB, 2, 1),
            jmp(isa.JMP_JNE, 2, 0, -3),
            exit_(),
        )
        rejects(p, "loop", cfg(strictness=STRICT))
        accepts(p, cfg(strictness=PERMISSIVE))

    def test_infinite_loop(self):
        p = prog(mov(0, 0), ja(-2), exit_())
        rejects(p, "loop", cfg(strictness=STRICT))
        accepts(p, cfg(strictness=PERMISSIVE))  # engine budget handles it

    def test_budget_on_huge_unroll(self):
        p = self.constant_loop(300000)
        rejects(p, "budget", cfg(strictness=STRICT, max_instructions=4096))


class TestLocalCalls:
    def test_simple_local_call(self):
        p = prog(
            mov(1, 20),
            call_local(2),      # call the doubler below
            mov_reg(0, 0),
            exit_(),
            alu64_reg(isa.ALU_ADD, 1, 1),  # callee: r0 = r1 + r1
            mov_reg(0, 1),
            exit_(),
        )
        accepts(p)

    def test_callee_r6_is_uninit(self):
        p = prog(
            mov(6, 1),
            mov(1, 20),
            call_local(2),
            mov_reg(0, 0),
            exit_(),
            mov_reg(0, 6),  # callee reads r6: not its own
            exit_(),
        )
        rejects(p, "uninit-read")

    def test_recursion_rejected(self):
        p = prog(
            mov(1, 1),
            call_local(-2),  # call self
            mov(0, 0),
            exit_(),
        )
        rep = verify(p, cfg())
        assert not rep.accepted
        assert rep.rejections[0][1] in ("bad-call", "loop")

    def test_bad_local_target(self):
        rejects(prog(call_local(99), exit_()), "bad-jump")


class TestAtomics:
    def test_atomic_on_stack(self):
        p = prog(
            mov(1, 5), stx(isa.SZ_DW, 10, 1, -8),
            mov_reg(2, 10), add(2, -8),
            atomic(isa.SZ_DW, 2, 1, 0, isa.ATOMIC_ADD),
            ldx(isa.SZ_DW, 0, 10, -8),
            exit_(),
        )
        accepts(p)

    def test_cmpxchg_needs_r0(self):
        p = prog(
            mov(1, 5), stx(isa.SZ_DW, 10, 1, -8),
            mov_reg(2, 10), add(2, -8),
            atomic(isa.SZ_DW, 2, 1, 0, isa.ATOMIC_CMPXCHG),  # r0 uninit
            exit_(),
        )
        rejects(p, "uninit-read")


class TestProperties:
    CORPUS = None

    def _corpus(self):
        progs = [
            prog(mov(0, 1), exit_()),
            prog(mov(1, 7), stx(isa.SZ_DW, 10, 1, -8),
                 ldx(isa.SZ_DW, 0, 10, -8), exit_()),
            prog(mov(0, 0), mov(1, 5), jmp(isa.JMP_JEQ, 1, 5, 1),
                 mov(0, 9), exit_()),
            TestLoops().constant_loop(5),
            prog(mov(0, 4), mov(1, 2), alu64_reg(isa.ALU_DIV, 0, 1), exit_()),
        ]
        return progs

    def test_strict_acceptance_implies_permissive(self):
        for p in self._corpus():
            if verify(p, cfg(strictness=STRICT)).accepted:
                assert verify(p, cfg(strictness=PERMISSIVE)).accepted

    def test_determinism(self):
        for p in self._corpus():
            a = verify(p, cfg())
            b = verify(p, cfg())
            assert a.verdict == b.verdict
            assert a.rejections == b.rejections

    def test_report_invariant(self):
        for p in self._corpus() + [prog(exit_()), prog(mov(0, 1))]:
            rep = verify(p, cfg())
            assert (rep.verdict == "accept") == (not rep.rejections)
