"""Set operations over sorted int64 ordinal arrays."""
import numpy as np

EMPTY = np.zeros(0, dtype=np.int64)


def intersect(lists):
    """Iterate the shortest list and binary-search probe the others."""
    if not lists:
        return EMPTY
    lists = sorted(lists, key=len)
    out = lists[0]
    for other in lists[1:]:
        if out.shape[0] == 0:
            break
        pos = np.searchsorted(other, out)
        pos[pos == other.shape[0]] = 0
        out = out[other[pos] == out] if other.shape[0] else EMPTY
    return out


def union(lists):
    lists = [x for x in lists if x.shape[0]]
    if not lists:
        return EMPTY
    if len(lists) == 1:
        return lists[0]
    return np.unique(np.concatenate(lists))


def remove(ordinals, dead):
    """Drop ordinals present in the sorted array ``dead``."""
    if dead.shape[0] == 0 or ordinals.shape[0] == 0:
        return ordinals
    pos = np.searchsorted(dead, ordinals)
    pos[pos == dead.shape[0]] = 0
    return ordinals[dead[pos] != ordinals]
