"""Kernel-numbered helper implementations.

Ids follow the kernel UAPI table (the compatibility floor inferred from
the tracing workloads this runtime targets):

    1   map_lookup_elem(map, key) -> value pointer or 0
    2   map_update_elem(map, key, value, flags)
    3   map_delete_elem(map, key)
    5   ktime_get_ns()
    6   trace_printk(fmt, fmt_size, a, b, c)
    14  get_current_pid_tgid() -> tgid << 32 | tid
    112 probe_read_user(dst, size, src)
    131 ringbuf_reserve(map, size, flags) -> payload pointer or 0
    132 ringbuf_submit(rec, flags)
    133 ringbuf_discard(rec, flags)

Map arguments arrive as small-integer handles (the loader patches them
into LDDW immediates); value/record results are real addresses inside
the map's shared segment, so programs dereference them directly.
"""

from __future__ import annotations

import ctypes
import os
import re
import sys
import threading
import time

from . import maps, native
from .engine import HelperRegistry

EFAULT = 14
EINVAL = 22
ENOENT = 2
EEXIST = 17
E2BIG = 7

_PRINTK_RE = re.compile(r"%[-0-9.]*(ll|l|h)?([duxXsc%p])")


class TraceSink:
    """Line-oriented destination for trace_printk output."""

    def __init__(self, stream=None):
        self.stream = stream if stream is not None else sys.stderr
        self.lock = threading.Lock()

    def emit(self, line: str) -> int:
        with self.lock:
            self.stream.write(line)
            if not line.endswith("\n"):
                self.stream.write("\n")
        return len(line)


def _u64(v: int) -> int:
    return v & 0xFFFFFFFFFFFFFFFF


def _neg(err: int) -> int:
    return _u64(-err)


def _read_cstr(addr: int, limit: int = 256) -> str:
    data = native.safe_read(addr, limit)
    if data is None:
        # shrink until the mapped prefix is found
        for size in (64, 16, 4, 1):
            data = native.safe_read(addr, size)
            if data is not None:
                break
        else:
            return "<fault>"
    nul = data.find(b"\x00")
    return (data[:nul] if nul >= 0 else data).decode("utf-8", "replace")


def format_printk(fmt: str, args: tuple[int, ...]) -> str:
    """The limited %-dialect the kernel helper accepts, three args max."""
    out = []
    pos = 0
    argi = 0
    for m in _PRINTK_RE.finditer(fmt):
        out.append(fmt[pos:m.start()])
        pos = m.end()
        length, conv = m.groups()
        if conv == "%":
            out.append("%")
            continue
        arg = args[argi] if argi < len(args) else 0
        argi += 1
        if conv == "d":
            width = 64 if length == "ll" else 32
            v = arg & ((1 << width) - 1)
            if v >= 1 << (width - 1):
                v -= 1 << width
            out.append(str(v))
        elif conv == "u":
            out.append(str(arg if length == "ll" else arg & 0xFFFFFFFF))
        elif conv in ("x", "X"):
            v = arg if length == "ll" else arg & 0xFFFFFFFF
            out.append(format(v, conv))
        elif conv == "p":
            out.append(hex(arg))
        elif conv == "c":
            out.append(chr(arg & 0x7F))
        elif conv == "s":
            out.append(_read_cstr(arg))
    out.append(fmt[pos:])
    return "".join(out)


def install_kernel_helpers(registry: HelperRegistry,
                           map_registry: maps.MapRegistry,
                           trace_sink: TraceSink | None = None) -> HelperRegistry:
    sink = trace_sink or TraceSink()

    def resolve(handle: int) -> maps.Map:
        return map_registry.get(handle)

    def map_lookup(h, key_addr, c, d, e):
        m = resolve(h)
        key = native.read_mem(key_addr, m.desc.key_size)
        try:
            return m.lookup_addr(key)
        except maps.BadKey:
            return 0

    def map_update(h, key_addr, val_addr, flags, e):
        m = resolve(h)
        key = native.read_mem(key_addr, m.desc.key_size)
        value = native.read_mem(val_addr, m.desc.value_size)
        try:
            m.update(key, value, flags & 0xF)
        except maps.KeyExists:
            return _neg(EEXIST)
        except maps.KeyAbsent:
            return _neg(ENOENT)
        except maps.TableFull:
            return _neg(E2BIG)
        except (maps.BadKey, maps.MapError):
            return _neg(EINVAL)
        return 0

    def map_delete(h, key_addr, c, d, e):
        m = resolve(h)
        key = native.read_mem(key_addr, m.desc.key_size)
        try:
            m.delete(key)
        except maps.KeyAbsent:
            return _neg(ENOENT)
        except maps.MapError:
            return _neg(EINVAL)
        return 0

    def ktime(a, b, c, d, e):
        return time.monotonic_ns()

    def trace_printk(fmt_addr, fmt_size, a, b, c):
        raw = native.safe_read(fmt_addr, min(fmt_size, 1024) or 1)
        if raw is None:
            return _neg(EFAULT)
        fmt = raw.split(b"\x00")[0].decode("utf-8", "replace")
        return sink.emit(format_printk(fmt, (a, b, c)))

    def pid_tgid(a, b, c, d, e):
        return _u64((os.getpid() << 32) | threading.get_native_id())

    def probe_read_user(dst, size, src, d, e):
        if size == 0:
            return 0
        data = native.safe_read(src, size)
        if data is None:
            return _neg(EFAULT)
        native.write_mem(dst, data)
        return 0

    def ringbuf_reserve(h, size, flags, d, e):
        m = resolve(h)
        if not isinstance(m, maps.RingBufMap):
            return 0
        try:
            return m.reserve(size).payload_addr
        except (maps.RingFull, maps.PayloadTooLarge):
            return 0

    def ringbuf_submit(rec_addr, flags, c, d, e):
        hdr = rec_addr - 8
        word = ctypes.c_uint32.from_address(hdr)
        word.value = word.value & maps.RB_LEN_MASK
        return 0

    def ringbuf_discard(rec_addr, flags, c, d, e):
        hdr = rec_addr - 8
        word = ctypes.c_uint32.from_address(hdr)
        word.value = (word.value & maps.RB_LEN_MASK) | maps.RB_DISCARD
        return 0

    registry.register_helper(1, map_lookup)
    registry.register_helper(2, map_update)
    registry.register_helper(3, map_delete)
    registry.register_helper(5, ktime)
    registry.register_helper(6, trace_printk)
    registry.register_helper(14, pid_tgid)
    registry.register_helper(112, probe_read_user)
    registry.register_helper(131, ringbuf_reserve)
    registry.register_helper(132, ringbuf_submit)
    registry.register_helper(133, ringbuf_discard)
    return registry


def default_registry(map_registry: maps.MapRegistry | None = None,
                     trace_sink: TraceSink | None = None) -> HelperRegistry:
    return install_kernel_helpers(HelperRegistry(),
                                  map_registry or maps.MapRegistry(),
                                  trace_sink)
