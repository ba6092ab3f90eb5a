"""Map backends living inside named shared-memory segments.

Every map owns exactly one segment.  The layout is position-independent
so any process that can open the segment can operate on the map; nothing
is kept in process memory except the mapping itself.

Segment layout (little-endian, offsets in bytes):

    0   magic "BPTM"
    4   version u32            (currently 1)
    8   map_type u32           kernel numbering: 1 hash, 2 array,
                               6 percpu_array, 27 ringbuf
    12  key_size u32
    16  value_size u32
    20  max_entries u32
    24  name                   16 bytes, NUL padded
    40  rw-lock word u32
    44  consumer-lock word u32 (ringbuf only)
    48  thread-ordinal counter u32 (percpu_array only)
    52  pad
    56  reserved u64
    64  payload

Hash payload: u64 nbuckets, u64 live, u64 tombstones, then nbuckets
buckets of [state u64 | key padded to 8 | value padded to 8].  Open
addressing, linear probing, FNV-1a 64 over the key bytes.

Array / percpu payload: max_entries value slots (padded to 8); the
percpu variant keeps 1024 per-thread slots per entry, indexed by a
thread ordinal handed out from the header counter.

Ringbuf payload: u64 consumer_pos, u64 producer_pos, then max_entries
data bytes.  Records carry an 8-byte header whose low u32 is the payload
length with a busy bit (1<<31) and a discard bit (1<<30); positions only
grow and are reduced modulo capacity, and a record never straddles the
wrap point (a discarded pad record fills the tail gap instead).
"""

from __future__ import annotations

import ctypes
import struct
import threading
from dataclasses import dataclass

from . import native, shm
from .native import ReadLocked, WriteLocked

MAGIC = b"BPTM"
VERSION = 1
HEADER_SIZE = 64

OFF_LOCK = 40
OFF_CONSUMER_LOCK = 44
OFF_ORDINAL = 48

MAP_TYPE_IDS = {"hash": 1, "array": 2, "percpu_array": 6, "ringbuf": 27}
MAP_TYPE_NAMES = {v: k for k, v in MAP_TYPE_IDS.items()}

# update flags, kernel numbering
ANY = 0
NOEXIST = 1
EXIST = 2

PERCPU_SLOTS = 1024

RB_BUSY = 1 << 31
RB_DISCARD = 1 << 30
RB_LEN_MASK = RB_DISCARD - 1

_EMPTY, _LIVE, _TOMB = 0, 1, 2


class MapError(Exception):
    pass


class InvalidDescriptor(MapError):
    pass


class BadKeySize(MapError):
    pass


class BadValueSize(MapError):
    pass


class BadKey(MapError):
    pass


class KeyExists(MapError):
    pass


class KeyAbsent(MapError):
    pass


class TableFull(MapError):
    pass


class Unsupported(MapError):
    pass


class InvalidHandle(MapError):
    pass


class RingFull(MapError):
    pass


class PayloadTooLarge(MapError):
    pass


class BadFlags(MapError):
    pass


def _pad8(n: int) -> int:
    return (n + 7) & ~7


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class MapDescriptor:
    map_type: str
    key_size: int
    value_size: int
    max_entries: int
    name: str
    segment_name: str = ""

    def validated(self) -> "MapDescriptor":
        if self.map_type not in MAP_TYPE_IDS:
            raise InvalidDescriptor(f"unknown map type {self.map_type!r}")
        if len(self.name.encode()) > 16 or not self.name:
            raise InvalidDescriptor("map name must be 1..16 bytes")
        if self.map_type == "ringbuf":
            if self.key_size != 0 or self.value_size != 0:
                raise InvalidDescriptor("ringbuf takes key_size == value_size == 0")
            if self.max_entries < 8 or self.max_entries & (self.max_entries - 1):
                raise InvalidDescriptor("ringbuf capacity must be a power of two")
        else:
            if self.key_size < 1 or self.value_size < 1 or self.max_entries < 1:
                raise InvalidDescriptor("sizes and max_entries must be positive")
            if self.map_type in ("array", "percpu_array") and self.key_size != 4:
                raise InvalidDescriptor("array maps take a 4-byte index key")
        if not self.segment_name:
            raise InvalidDescriptor("segment_name required")
        return self


def _hash_geometry(desc: MapDescriptor) -> tuple[int, int]:
    nbuckets = 8
    while nbuckets < desc.max_entries * 2:
        nbuckets *= 2
    bucket_size = 8 + _pad8(desc.key_size) + _pad8(desc.value_size)
    return nbuckets, bucket_size


def _payload_size(desc: MapDescriptor) -> int:
    if desc.map_type == "hash":
        nbuckets, bucket_size = _hash_geometry(desc)
        return 24 + nbuckets * bucket_size
    if desc.map_type == "array":
        return desc.max_entries * _pad8(desc.value_size)
    if desc.map_type == "percpu_array":
        return desc.max_entries * PERCPU_SLOTS * _pad8(desc.value_size)
    return 16 + desc.max_entries  # ringbuf: positions + data


class Map:
    """Common segment plumbing; subclasses add the semantics."""

    def __init__(self, desc: MapDescriptor, segment: shm.Segment):
        self.desc = desc
        self.segment = segment
        kit = native.atomic_kit()
        if kit is not None:
            self.lock = native.SpinRwLock(segment.address + OFF_LOCK, kit)
        else:
            self.lock = native.FcntlRwLock(segment.fd, 0)
        self._payload = segment.address + HEADER_SIZE

    # -- lifecycle ----------------------------------------------------------

    @staticmethod
    def create(desc: MapDescriptor) -> "Map":
        desc = desc.validated()
        size = HEADER_SIZE + _payload_size(desc)
        seg = shm.Segment.create(desc.segment_name, size)
        hdr = struct.pack(
            "<4sIIIII16s", MAGIC, VERSION, MAP_TYPE_IDS[desc.map_type],
            desc.key_size, desc.value_size, desc.max_entries,
            desc.name.encode())
        seg.write(0, hdr)
        m = _CLASSES[desc.map_type](desc, seg)
        m._init_payload()
        return m

    @staticmethod
    def open(segment_name: str) -> "Map":
        seg = shm.Segment.open(segment_name)
        magic, version, type_id, ksz, vsz, maxe, name = struct.unpack_from(
            "<4sIIIII16s", seg.read(0, 40))
        if magic != MAGIC:
            seg.close()
            raise InvalidDescriptor(f"segment {segment_name!r} is not a map")
        if version != VERSION:
            seg.close()
            raise InvalidDescriptor(f"map segment version {version} unsupported")
        desc = MapDescriptor(MAP_TYPE_NAMES[type_id], ksz, vsz, maxe,
                             name.rstrip(b"\x00").decode(), segment_name)
        return _CLASSES[desc.map_type](desc, seg)

    def _init_payload(self) -> None:
        pass

    def close(self) -> None:
        self.segment.close()

    def destroy(self) -> None:
        self.segment.destroy()

    # -- region the engine may hand to programs ------------------------------

    def data_region(self) -> tuple[int, int]:
        return (self._payload, self.segment.size - HEADER_SIZE)

    # -- key/value surface; subclasses override what they support ------------

    def _check_key(self, key: bytes) -> None:
        if len(key) != self.desc.key_size:
            raise BadKeySize(
                f"key is {len(key)} bytes, map takes {self.desc.key_size}")

    def _check_value(self, value: bytes) -> None:
        if len(value) != self.desc.value_size:
            raise BadValueSize(
                f"value is {len(value)} bytes, map takes {self.desc.value_size}")

    def lookup(self, key: bytes) -> bytes | None:
        raise Unsupported(f"lookup on {self.desc.map_type}")

    def lookup_addr(self, key: bytes) -> int:
        """Address of the live value inside the segment, 0 when absent.
        Zero-copy path for program access; the address stays mapped but may
        go logically stale if the key is deleted afterwards."""
        raise Unsupported(f"lookup on {self.desc.map_type}")

    def update(self, key: bytes, value: bytes, flags: int = ANY) -> None:
        raise Unsupported(f"update on {self.desc.map_type}")

    def delete(self, key: bytes) -> None:
        raise Unsupported(f"delete on {self.desc.map_type}")

    def get_next_key(self, key: bytes | None) -> bytes | None:
        raise Unsupported(f"iteration on {self.desc.map_type}")


class HashMap(Map):
    def __init__(self, desc, segment):
        super().__init__(desc, segment)
        self.nbuckets, self.bucket_size = _hash_geometry(desc)
        self._koff = 8
        self._voff = 8 + _pad8(desc.key_size)
        self._buckets = self._payload + 24

    def _init_payload(self):
        native.write_mem(self._payload, struct.pack("<QQQ", self.nbuckets, 0, 0))

    @property
    def live_count(self) -> int:
        return ctypes.c_uint64.from_address(self._payload + 8).value

    def _set_live(self, n: int) -> None:
        ctypes.c_uint64.from_address(self._payload + 8).value = n

    def _bucket(self, i: int) -> int:
        return self._buckets + i * self.bucket_size

    def _state(self, baddr: int) -> int:
        return ctypes.c_uint64.from_address(baddr).value

    def _key_at(self, baddr: int) -> bytes:
        return native.read_mem(baddr + self._koff, self.desc.key_size)

    def _find(self, key: bytes) -> tuple[int | None, int | None]:
        """(live slot index holding key, first insertable slot index)."""
        h = fnv1a64(key)
        idx = h & (self.nbuckets - 1)
        insert_at = None
        for _ in range(self.nbuckets):
            baddr = self._bucket(idx)
            state = self._state(baddr)
            if state == _EMPTY:
                return None, insert_at if insert_at is not None else idx
            if state == _TOMB:
                if insert_at is None:
                    insert_at = idx
            elif self._key_at(baddr) == key:
                return idx, insert_at
            idx = (idx + 1) & (self.nbuckets - 1)
        return None, insert_at

    def lookup(self, key: bytes) -> bytes | None:
        self._check_key(key)
        with ReadLocked(self.lock):
            slot, _ = self._find(key)
            if slot is None:
                return None
            return native.read_mem(self._bucket(slot) + self._voff,
                                   self.desc.value_size)

    def lookup_addr(self, key: bytes) -> int:
        self._check_key(key)
        with ReadLocked(self.lock):
            slot, _ = self._find(key)
            if slot is None:
                return 0
            return self._bucket(slot) + self._voff

    def update(self, key: bytes, value: bytes, flags: int = ANY) -> None:
        self._check_key(key)
        self._check_value(value)
        if flags not in (ANY, NOEXIST, EXIST):
            raise BadFlags(f"flags {flags}")
        with WriteLocked(self.lock):
            slot, insert_at = self._find(key)
            if slot is not None:
                if flags == NOEXIST:
                    raise KeyExists(key.hex())
                native.write_mem(self._bucket(slot) + self._voff, value)
                return
            if flags == EXIST:
                raise KeyAbsent(key.hex())
            if self.live_count >= self.desc.max_entries:
                raise TableFull(f"{self.desc.max_entries} live keys")
            baddr = self._bucket(insert_at)
            native.write_mem(baddr + self._koff, key)
            native.write_mem(baddr + self._voff, value)
            ctypes.c_uint64.from_address(baddr).value = _LIVE
            self._set_live(self.live_count + 1)

    def delete(self, key: bytes) -> None:
        self._check_key(key)
        with WriteLocked(self.lock):
            slot, _ = self._find(key)
            if slot is None:
                raise KeyAbsent(key.hex())
            ctypes.c_uint64.from_address(self._bucket(slot)).value = _TOMB
            self._set_live(self.live_count - 1)

    def get_next_key(self, key: bytes | None) -> bytes | None:
        with ReadLocked(self.lock):
            start = 0
            if key is not None:
                self._check_key(key)
                slot, _ = self._find(key)
                if slot is not None:
                    start = slot + 1
                # vanished cursor: restart from the beginning, like the
                # kernel API does
            for idx in range(start, self.nbuckets):
                baddr = self._bucket(idx)
                if self._state(baddr) == _LIVE:
                    return self._key_at(baddr)
            return None

    def keys(self) -> list[bytes]:
        out, k = [], self.get_next_key(None)
        while k is not None:
            out.append(k)
            k = self.get_next_key(k)
        return out


class ArrayMap(Map):
    def __init__(self, desc, segment):
        super().__init__(desc, segment)
        self.slot_size = _pad8(desc.value_size)

    def _index(self, key: bytes) -> int:
        self._check_key(key)
        idx = struct.unpack("<I", key)[0]
        if idx >= self.desc.max_entries:
            raise BadKey(f"index {idx} >= max_entries {self.desc.max_entries}")
        return idx

    def _slot(self, idx: int) -> int:
        return self._payload + idx * self.slot_size

    def lookup(self, key: bytes) -> bytes | None:
        idx = self._index(key)
        with ReadLocked(self.lock):
            return native.read_mem(self._slot(idx), self.desc.value_size)

    def lookup_addr(self, key: bytes) -> int:
        return self._slot(self._index(key))

    def update(self, key: bytes, value: bytes, flags: int = ANY) -> None:
        idx = self._index(key)
        self._check_value(value)
        if flags == NOEXIST:
            raise KeyExists("array entries always exist")
        with WriteLocked(self.lock):
            native.write_mem(self._slot(idx), value)

    def delete(self, key: bytes) -> None:
        raise Unsupported("array entries cannot be deleted")

    def get_next_key(self, key: bytes | None) -> bytes | None:
        if key is None:
            nxt = 0
        else:
            self._check_key(key)
            nxt = struct.unpack("<I", key)[0] + 1
        if nxt >= self.desc.max_entries:
            return None
        return struct.pack("<I", nxt)


_thread_ordinals = threading.local()


class PerCpuArrayMap(ArrayMap):
    """'Per-cpu' realized as per-thread: each thread gets a runtime ordinal
    (from the counter in the segment header, so it is unique across
    processes) selecting its private slot column."""

    def _ordinal(self) -> int:
        cache = getattr(_thread_ordinals, "by_segment", None)
        if cache is None:
            cache = _thread_ordinals.by_segment = {}
        ordinal = cache.get(self.desc.segment_name)
        if ordinal is None:
            ordinal = native.atomic_fetch_add_u32(
                self.segment.address + OFF_ORDINAL, 1)
            if ordinal >= PERCPU_SLOTS:
                raise MapError(f"more than {PERCPU_SLOTS} threads on one map")
            cache[self.desc.segment_name] = ordinal
        return ordinal

    def _slot(self, idx: int, ordinal: int | None = None) -> int:
        if ordinal is None:
            ordinal = self._ordinal()
        return (self._payload
                + idx * PERCPU_SLOTS * self.slot_size
                + ordinal * self.slot_size)

    def lookup_all_slots(self, key: bytes) -> list[bytes]:
        """Snapshot of every per-thread slot for aggregation."""
        idx = self._index(key)
        with ReadLocked(self.lock):
            return [native.read_mem(self._slot(idx, s), self.desc.value_size)
                    for s in range(PERCPU_SLOTS)]


class ReservedRecord:
    __slots__ = ("header_addr", "payload_addr", "size")

    def __init__(self, header_addr: int, size: int):
        self.header_addr = header_addr
        self.payload_addr = header_addr + 8
        self.size = size


class RingBufMap(Map):
    def __init__(self, desc, segment):
        super().__init__(desc, segment)
        self.capacity = desc.max_entries
        self._data = self._payload + 16
        kit = native.atomic_kit()
        if kit is not None:
            self._consumer_lock = native.SpinRwLock(
                segment.address + OFF_CONSUMER_LOCK, kit)
        else:
            self._consumer_lock = native.FcntlRwLock(segment.fd, 1)

    def _pos(self, which: int) -> int:
        return ctypes.c_uint64.from_address(self._payload + which * 8).value

    def _set_pos(self, which: int, v: int) -> None:
        ctypes.c_uint64.from_address(self._payload + which * 8).value = v

    def _hdr_addr(self, pos: int) -> int:
        return self._data + (pos & (self.capacity - 1))

    def reserve(self, size: int) -> ReservedRecord:
        if size < 0 or size + 8 > self.capacity:
            raise PayloadTooLarge(f"{size} bytes, capacity {self.capacity}")
        total = 8 + _pad8(size)
        with WriteLocked(self.lock):
            cons = self._pos(0)
            prod = self._pos(1)
            tail_gap = self.capacity - (prod & (self.capacity - 1))
            need = total
            pad = tail_gap if tail_gap < total else 0
            if pad and pad < 8:
                raise AssertionError("positions must stay 8-aligned")
            if prod + need + pad - cons > self.capacity:
                raise RingFull(f"{need + pad} bytes wanted, "
                               f"{self.capacity - (prod - cons)} free")
            if pad:
                ctypes.c_uint32.from_address(self._hdr_addr(prod)).value = \
                    (pad - 8) | RB_DISCARD
                prod += pad
            hdr = self._hdr_addr(prod)
            ctypes.c_uint32.from_address(hdr).value = size | RB_BUSY
            self._set_pos(1, prod + total)
            return ReservedRecord(hdr, size)

    def submit(self, rec: ReservedRecord) -> None:
        ctypes.c_uint32.from_address(rec.header_addr).value = rec.size

    def discard(self, rec: ReservedRecord) -> None:
        ctypes.c_uint32.from_address(rec.header_addr).value = \
            rec.size | RB_DISCARD

    def output(self, payload: bytes) -> None:
        rec = self.reserve(len(payload))
        native.write_mem(rec.payload_addr, payload)
        self.submit(rec)

    def consume(self, sink) -> int:
        """Deliver every committed record in order; single consumer."""
        delivered = 0
        with WriteLocked(self._consumer_lock):
            cons = self._pos(0)
            while True:
                prod = self._pos(1)
                if cons >= prod:
                    break
                word = ctypes.c_uint32.from_address(self._hdr_addr(cons)).value
                if word & RB_BUSY:
                    break
                size = word & RB_LEN_MASK
                if not word & RB_DISCARD:
                    sink(native.read_mem(self._hdr_addr(cons) + 8, size))
                    delivered += 1
                cons += 8 + _pad8(size)
                self._set_pos(0, cons)
        return delivered


_CLASSES = {"hash": HashMap, "array": ArrayMap,
            "percpu_array": PerCpuArrayMap, "ringbuf": RingBufMap}


class MapRegistry:
    """Process-local handle table the engine's map helpers resolve through.

    Handle numbering is owned by whoever drives this registry (the control
    plane starts at 3; standalone embedders may pass explicit handles).
    """

    def __init__(self, first_handle: int = 3):
        self._maps: dict[int, Map] = {}
        self._next = first_handle

    def add(self, m: Map, handle: int | None = None) -> int:
        if handle is None:
            handle = self._next
        if handle in self._maps:
            raise InvalidHandle(f"handle {handle} in use")
        self._maps[handle] = m
        self._next = max(self._next, handle + 1)
        return handle

    def create(self, desc: MapDescriptor, handle: int | None = None) -> int:
        return self.add(Map.create(desc), handle)

    def get(self, handle: int) -> Map:
        try:
            return self._maps[handle]
        except KeyError:
            raise InvalidHandle(f"no map with handle {handle}") from None

    def handles(self) -> list[int]:
        return sorted(self._maps)

    def items(self):
        return sorted(self._maps.items())

    def close_all(self, destroy: bool = False) -> None:
        for m in self._maps.values():
            (m.destroy if destroy else m.close)()
        self._maps.clear()


def make_segment_name(registry_id: str, map_name: str) -> str:
    return f"bpftime_{registry_id}_{map_name}"
