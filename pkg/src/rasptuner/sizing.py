"""Allocator-agnostic byte accounting for agent state.

Walks an object graph and sums container overheads plus numpy buffer
sizes, deduplicating shared buffers by id. Used by the harness to report
memory growth between two points of a run without depending on a specific
allocator or tracing hook.
"""

from __future__ import annotations

import sys
from dataclasses import fields, is_dataclass

import numpy as np


def deep_size_bytes(obj, _seen: set[int] | None = None) -> int:
    seen = _seen if _seen is not None else set()
    oid = id(obj)
    if oid in seen:
        return 0
    seen.add(oid)

    if isinstance(obj, np.ndarray):
        total = sys.getsizeof(obj)
        if obj.base is not None:
            total += deep_size_bytes(obj.base, seen)
        return total
    if isinstance(obj, (str, bytes, bytearray, int, float, complex, bool, type(None))):
        return sys.getsizeof(obj)
    if isinstance(obj, dict):
        total = sys.getsizeof(obj)
        for key, value in obj.items():
            total += deep_size_bytes(key, seen) + deep_size_bytes(value, seen)
        return total
    if isinstance(obj, (list, tuple, set, frozenset)):
        return sys.getsizeof(obj) + sum(deep_size_bytes(item, seen) for item in obj)
    if is_dataclass(obj) and not isinstance(obj, type):
        total = sys.getsizeof(obj)
        for f in fields(obj):
            total += deep_size_bytes(getattr(obj, f.name), seen)
        return total

    total = sys.getsizeof(obj)
    attrs = getattr(obj, "__dict__", None)
    if attrs is not None:
        total += deep_size_bytes(attrs, seen)
    slots = getattr(type(obj), "__slots__", ())
    for name in slots if isinstance(slots, (list, tuple)) else (slots,) if slots else ():
        if hasattr(obj, name):
            total += deep_size_bytes(getattr(obj, name), seen)
    return total
