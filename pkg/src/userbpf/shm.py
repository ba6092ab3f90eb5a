"""Named shared-memory segments backed by /dev/shm files.

The mmap module cannot hand out the base address of a read-only mapping,
and every consumer here (map backends, the engine's region table, the
JIT) needs real addresses, so mapping goes through libc directly.
"""

from __future__ import annotations

import ctypes
import errno
import os
import stat

from . import native

SHM_DIR = "/dev/shm"


class ShmError(OSError):
    pass


class SegmentExists(ShmError):
    pass


class SegmentMissing(ShmError):
    pass


class OutOfSharedMemory(ShmError):
    pass


def _path(name: str) -> str:
    if not name or "/" in name or name.startswith("."):
        raise ValueError(f"bad segment name {name!r}")
    return os.path.join(SHM_DIR, name)


class Segment:
    """One named mapping; create() zero-fills, open() attaches."""

    def __init__(self, name: str, size: int, fd: int, address: int,
                 readonly: bool, owner: bool):
        self.name = name
        self.size = size
        self.readonly = readonly
        self.owner = owner
        self._fd = fd
        self.address = address
        self._closed = False

    @classmethod
    def create(cls, name: str, size: int) -> "Segment":
        path = _path(name)
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_RDWR,
                         stat.S_IRUSR | stat.S_IWUSR)
        except FileExistsError:
            raise SegmentExists(errno.EEXIST, f"segment {name!r} exists")
        try:
            os.ftruncate(fd, size)
            addr = native.sys_mmap(0, size, native.PROT_READ | native.PROT_WRITE,
                                   native.MAP_SHARED, fd, 0)
        except OSError as e:
            os.close(fd)
            os.unlink(path)
            if e.errno in (errno.ENOSPC, errno.ENOMEM):
                raise OutOfSharedMemory(e.errno, str(e))
            raise
        return cls(name, size, fd, addr, readonly=False, owner=True)

    @classmethod
    def open(cls, name: str, readonly: bool = False) -> "Segment":
        path = _path(name)
        try:
            fd = os.open(path, os.O_RDONLY if readonly else os.O_RDWR)
        except FileNotFoundError:
            raise SegmentMissing(errno.ENOENT, f"segment {name!r} missing")
        size = os.fstat(fd).st_size
        prot = native.PROT_READ if readonly else (native.PROT_READ | native.PROT_WRITE)
        try:
            addr = native.sys_mmap(0, size, prot, native.MAP_SHARED, fd, 0)
        except OSError:
            os.close(fd)
            raise
        return cls(name, size, fd, addr, readonly=readonly, owner=False)

    @staticmethod
    def exists(name: str) -> bool:
        return os.path.exists(_path(name))

    @staticmethod
    def unlink(name: str) -> None:
        try:
            os.unlink(_path(name))
        except FileNotFoundError:
            pass

    @property
    def fd(self) -> int:
        return self._fd

    def view(self, offset: int = 0, length: int | None = None) -> memoryview:
        """Memoryview over [offset, offset+length); read-only mappings hand
        out read-only views so misuse fails in Python instead of faulting."""
        if length is None:
            length = self.size - offset
        if offset < 0 or offset + length > self.size:
            raise ValueError("view outside segment")
        arr = (ctypes.c_ubyte * length).from_address(self.address + offset)
        mv = memoryview(arr).cast("B")
        return mv.toreadonly() if self.readonly else mv

    def read(self, offset: int, length: int) -> bytes:
        if offset < 0 or offset + length > self.size:
            raise ValueError("read outside segment")
        return native.read_mem(self.address + offset, length)

    def write(self, offset: int, data: bytes) -> None:
        if self.readonly:
            raise ShmError(errno.EACCES, "segment mapped read-only")
        if offset < 0 or offset + len(data) > self.size:
            raise ValueError("write outside segment")
        native.write_mem(self.address + offset, data)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            native.sys_munmap(self.address, self.size)
            os.close(self._fd)

    def destroy(self) -> None:
        self.close()
        self.unlink(self.name)

    def __enter__(self) -> "Segment":
        return self

    def __exit__(self, *exc) -> bool:
        self.close()
        return False
