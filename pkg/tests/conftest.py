import os
import uuid

import pytest

from userbpf import maps, shm


@pytest.fixture
def seg_name():
    """Unique segment name, unlinked afterwards."""
    names = []

    def make(suffix="m"):
        n = f"ubtest_{os.getpid()}_{uuid.uuid4().hex[:8]}_{suffix}"
        names.append(n)
        return n

    yield make
    for n in names:
        shm.Segment.unlink(n)


@pytest.fixture
def make_map(seg_name):
    created = []

    def make(map_type, key_size=8, value_size=8, max_entries=128, name="m"):
        desc = maps.MapDescriptor(map_type, key_size, value_size, max_entries,
                                  name, seg_name(name))
        m = maps.Map.create(desc)
        created.append(m)
        return m

    yield make
    for m in created:
        try:
            m.destroy()
        except OSError:
            pass
