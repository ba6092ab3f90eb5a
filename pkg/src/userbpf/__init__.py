"""userbpf: a userspace eBPF runtime.

Verified eBPF bytecode executes inside the host process (interpreter or
x86-64 JIT), kernel-style maps live in named shared-memory segments,
functions and syscalls are hooked through binary-rewrite plans, and a
record/replay control plane mirrors the bpf() command surface as plain
function calls.
"""

__version__ = "0.1.0"
