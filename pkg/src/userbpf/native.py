"""Platform primitives: executable memory, atomics, and in-segment locks.

CPython has no portable way to issue a lock-prefixed read-modify-write on
a shared mapping, so on x86-64 we map one executable page at startup and
fill it with a handful of hand-assembled helpers (cmpxchg/xadd/xchg).
Everything that must be atomic across processes (map locks, ring buffer
positions, per-map thread ordinals, the atomic instruction class in the
engine) routes through these.

On other architectures the kit is absent and callers fall back to a
process-local mutex; cross-process atomicity is then not provided, which
is acceptable because binary rewriting (the reason this package exists)
is x86-64 only anyway.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import errno as errno_mod
import mmap as _mmap_mod
import os
import platform
import threading
import time

PAGE_SIZE = _mmap_mod.PAGESIZE

PROT_NONE = 0
PROT_READ = 1
PROT_WRITE = 2
PROT_EXEC = 4

MAP_SHARED = 0x01
MAP_PRIVATE = 0x02
MAP_FIXED = 0x10
MAP_ANONYMOUS = 0x20

_libc = ctypes.CDLL(None, use_errno=True)
_libc.mmap.restype = ctypes.c_void_p
_libc.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int,
                       ctypes.c_int, ctypes.c_int, ctypes.c_long]
_libc.munmap.restype = ctypes.c_int
_libc.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]
_libc.mprotect.restype = ctypes.c_int
_libc.mprotect.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]
_libc.syscall.restype = ctypes.c_long

MAP_FAILED = ctypes.c_void_p(-1).value


class NativeError(OSError):
    pass


def is_x86_64() -> bool:
    return platform.machine() in ("x86_64", "AMD64")


def sys_mmap(addr: int, size: int, prot: int, flags: int,
             fd: int = -1, off: int = 0) -> int:
    res = _libc.mmap(addr, size, prot, flags, fd, off)
    if res == MAP_FAILED or res is None:
        raise NativeError(ctypes.get_errno(), os.strerror(ctypes.get_errno()))
    return res


def sys_munmap(addr: int, size: int) -> None:
    _libc.munmap(addr, size)


def mprotect(addr: int, size: int, prot: int) -> None:
    start = addr & ~(PAGE_SIZE - 1)
    length = (addr + size) - start
    if _libc.mprotect(start, length, prot) != 0:
        raise NativeError(ctypes.get_errno(),
                          f"mprotect({start:#x}, {length}) failed")


def raw_syscall(nr: int, *args: int) -> int:
    """Direct syscall(2) through libc; returns -errno on failure."""
    argv = [ctypes.c_long(a & 0xFFFFFFFFFFFFFFFF) for a in args]
    ctypes.set_errno(0)
    res = _libc.syscall(ctypes.c_long(nr), *argv)
    if res == -1:
        err = ctypes.get_errno()
        if err:
            return -err
    return res


def read_mem(addr: int, size: int) -> bytes:
    return ctypes.string_at(addr, size)


def write_mem(addr: int, data: bytes) -> None:
    ctypes.memmove(addr, data, len(data))


class _IoVec(ctypes.Structure):
    _fields_ = [("iov_base", ctypes.c_void_p), ("iov_len", ctypes.c_size_t)]


_HAS_PROCESS_VM = None


def safe_read(addr: int, size: int) -> bytes | None:
    """Read process memory without risking a fault; None if unmapped.

    Uses process_vm_readv on ourselves (the kernel validates the remote
    range); falls back to a mincore page-presence probe plus a direct
    read where that syscall is filtered.
    """
    global _HAS_PROCESS_VM
    if size == 0:
        return b""
    if addr == 0:
        return None
    if _HAS_PROCESS_VM is not False:
        buf = ctypes.create_string_buffer(size)
        local = _IoVec(ctypes.addressof(buf), size)
        remote = _IoVec(addr, size)
        try:
            _libc.process_vm_readv.restype = ctypes.c_ssize_t
            n = _libc.process_vm_readv(os.getpid(), ctypes.byref(local), 1,
                                       ctypes.byref(remote), 1, 0)
        except AttributeError:
            n = -1
            ctypes.set_errno(errno_mod.ENOSYS)
        if n == size:
            _HAS_PROCESS_VM = True
            return buf.raw
        err = ctypes.get_errno()
        if _HAS_PROCESS_VM is None and err in (errno_mod.ENOSYS,
                                               errno_mod.EPERM):
            _HAS_PROCESS_VM = False
        else:
            return None
    # mincore fallback: every touched page must be mapped
    start = addr & ~(PAGE_SIZE - 1)
    npages = ((addr + size) - start + PAGE_SIZE - 1) // PAGE_SIZE
    vec = (ctypes.c_ubyte * npages)()
    if _libc.mincore(ctypes.c_void_p(start), npages * PAGE_SIZE, vec) != 0:
        return None
    return read_mem(addr, size)


class ExecBuffer:
    """Bump allocator over RWX chunks, 16-byte aligned blocks.

    ``alloc_near`` passes the hint to mmap so relative-jump patches can
    usually reach the chunk; the caller must still check the distance.
    """

    CHUNK = 256 * 1024

    def __init__(self):
        self._chunks: list[tuple[int, int]] = []  # (base, used)
        self._lock = threading.Lock()

    def _new_chunk(self, hint: int) -> int:
        base = sys_mmap(hint & ~(PAGE_SIZE - 1), self.CHUNK,
                        PROT_READ | PROT_WRITE | PROT_EXEC,
                        MAP_PRIVATE | MAP_ANONYMOUS)
        self._chunks.append([base, 0])
        return len(self._chunks) - 1

    def alloc(self, code: bytes, hint: int = 0, max_distance: int = 0) -> int:
        """Copy ``code`` into executable memory and return its address.

        With ``max_distance`` nonzero, the block is guaranteed to lie
        within that distance of ``hint`` (a fresh chunk is mapped with the
        hint if needed; NativeError if the kernel will not oblige).
        """
        size = (len(code) + 15) & ~15
        with self._lock:
            chosen = None
            for i, (base, used) in enumerate(self._chunks):
                if used + size > self.CHUNK:
                    continue
                if max_distance and abs((base + used) - hint) > max_distance:
                    continue
                chosen = i
                break
            if chosen is None:
                chosen = self._new_chunk(hint)
                base = self._chunks[chosen][0]
                if max_distance and abs(base - hint) > max_distance:
                    raise NativeError(0,
                                      f"no executable memory within {max_distance:#x} "
                                      f"of {hint:#x}")
            base, used = self._chunks[chosen]
            addr = base + used
            self._chunks[chosen][1] = used + size
        write_mem(addr, code)
        return addr


_exec_buffer: ExecBuffer | None = None
_exec_lock = threading.Lock()


def exec_buffer() -> ExecBuffer:
    global _exec_buffer
    with _exec_lock:
        if _exec_buffer is None:
            _exec_buffer = ExecBuffer()
        return _exec_buffer


# --- atomic kit -------------------------------------------------------------

_SIG3 = ctypes.CFUNCTYPE(ctypes.c_uint64, ctypes.c_uint64, ctypes.c_uint64,
                         ctypes.c_uint64)
_SIG2 = ctypes.CFUNCTYPE(ctypes.c_uint64, ctypes.c_uint64, ctypes.c_uint64)

# args: rdi = address, rsi = first operand, rdx = second operand
_KIT_CODE = {
    # mov rax, rsi; lock cmpxchg [rdi], rdx; ret  -> returns previous value
    "cas_u64": ("4889f0" "f0480fb117" "c3", _SIG3),
    # mov eax, esi; lock cmpxchg [rdi], edx; ret
    "cas_u32": ("89f0" "f00fb117" "c3", _SIG3),
    # mov rax, rsi; lock xadd [rdi], rax; ret     -> returns previous value
    "xadd_u64": ("4889f0" "f0480fc107" "c3", _SIG2),
    "xadd_u32": ("89f0" "f00fc107" "c3", _SIG2),
    # mov rax, rsi; xchg [rdi], rax; ret          (xchg with memory locks)
    "xchg_u64": ("4889f0" "488707" "c3", _SIG2),
    "xchg_u32": ("89f0" "8707" "c3", _SIG2),
}


class AtomicKit:
    """Sequentially-consistent RMW primitives on raw addresses."""

    def __init__(self):
        buf = exec_buffer()
        for name, (hexcode, sig) in _KIT_CODE.items():
            addr = buf.alloc(bytes.fromhex(hexcode))
            setattr(self, name, sig(addr))

    # CAS loops for the boolean ops; x86 has no single-instruction form
    # that also returns the old value.
    def _loop(self, addr: int, operand: int, fn, width: int) -> int:
        cas = self.cas_u64 if width == 8 else self.cas_u32
        mask = (1 << (width * 8)) - 1
        load = ctypes.c_uint64 if width == 8 else ctypes.c_uint32
        while True:
            old = load.from_address(addr).value
            if cas(addr, old, fn(old, operand) & mask) == old:
                return old

    def and_u64(self, addr, v): return self._loop(addr, v, lambda a, b: a & b, 8)
    def or_u64(self, addr, v): return self._loop(addr, v, lambda a, b: a | b, 8)
    def xor_u64(self, addr, v): return self._loop(addr, v, lambda a, b: a ^ b, 8)
    def and_u32(self, addr, v): return self._loop(addr, v, lambda a, b: a & b, 4)
    def or_u32(self, addr, v): return self._loop(addr, v, lambda a, b: a | b, 4)
    def xor_u32(self, addr, v): return self._loop(addr, v, lambda a, b: a ^ b, 4)


_kit: AtomicKit | None = None
_kit_lock = threading.Lock()
_fallback_mutex = threading.RLock()


def atomic_kit() -> AtomicKit | None:
    """Process singleton; None when generated code is unavailable."""
    global _kit
    if not is_x86_64():
        return None
    with _kit_lock:
        if _kit is None:
            _kit = AtomicKit()
        return _kit


class SpinRwLock:
    """Reader-writer spinlock over one u32 in shared memory.

    0 = free, 0xFFFFFFFF = writer held, n = reader count.  Spins with
    sched_yield backoff; writers can starve under heavy read load, which
    is fine at the scales this runtime targets.
    """

    WRITER = 0xFFFFFFFF

    def __init__(self, addr: int, kit: AtomicKit):
        self._addr = addr
        self._kit = kit
        self._word = ctypes.c_uint32.from_address(addr)

    def _backoff(self, spins: int) -> None:
        if spins % 64 == 63:
            time.sleep(0.000001)
        else:
            os.sched_yield()

    def acquire_read(self) -> None:
        spins = 0
        while True:
            v = self._word.value
            if v != self.WRITER and self._kit.cas_u32(self._addr, v, v + 1) == v:
                return
            self._backoff(spins)
            spins += 1

    def release_read(self) -> None:
        self._kit.xadd_u32(self._addr, 0xFFFFFFFF)

    def acquire_write(self) -> None:
        spins = 0
        while self._kit.cas_u32(self._addr, 0, self.WRITER) != 0:
            self._backoff(spins)
            spins += 1

    def release_write(self) -> None:
        self._word.value = 0  # aligned store: atomic and release-ordered on x86


class FcntlRwLock:
    """Degraded fallback: exclusive byte-range lock on the segment file."""

    def __init__(self, fd: int, index: int):
        self._fd = fd
        self._index = index
        self._local = threading.RLock()

    def _lock(self):
        import fcntl
        fcntl.lockf(self._fd, fcntl.LOCK_EX, 1, self._index)

    def _unlock(self):
        import fcntl
        fcntl.lockf(self._fd, fcntl.LOCK_UN, 1, self._index)

    def acquire_read(self):
        self._local.acquire()
        self._lock()

    def release_read(self):
        self._unlock()
        self._local.release()

    acquire_write = acquire_read
    release_write = release_read


class ReadLocked:
    def __init__(self, lock): self._lock = lock
    def __enter__(self): self._lock.acquire_read(); return self
    def __exit__(self, *exc): self._lock.release_read(); return False


class WriteLocked:
    def __init__(self, lock): self._lock = lock
    def __enter__(self): self._lock.acquire_write(); return self
    def __exit__(self, *exc): self._lock.release_write(); return False


def atomic_fetch_add_u32(addr: int, delta: int) -> int:
    """xadd through the kit, or mutex-guarded on fallback platforms."""
    kit = atomic_kit()
    if kit is not None:
        return kit.xadd_u32(addr, delta & 0xFFFFFFFF)
    with _fallback_mutex:
        word = ctypes.c_uint32.from_address(addr)
        old = word.value
        word.value = (old + delta) & 0xFFFFFFFF
        return old
