"""Process-level allocator tuning.

The engine allocates many short-lived arrays of a few megabytes.  glibc serves
those through mmap and returns them on free, so every op pays fresh page
faults.  Raising the mmap and trim thresholds keeps them on the heap, which
roughly halves step time.  Set ``MACLOOKUP_NO_MALLOC_TUNING=1`` to skip this.
"""

from __future__ import annotations

import ctypes
import os
import platform

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
MMAP_THRESHOLD = 256 * 1024 * 1024
TRIM_THRESHOLD = 512 * 1024 * 1024

_applied = False


def tune_allocator() -> bool:
    """Apply the thresholds once; returns True when they are in effect."""
    global _applied
    if _applied:
        return True
    if os.environ.get("MACLOOKUP_NO_MALLOC_TUNING") or platform.system() != "Linux":
        return False
    if platform.libc_ver()[0] != "glibc":
        return False
    try:
        libc = ctypes.CDLL(None)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, MMAP_THRESHOLD) and libc.mallopt(_M_TRIM_THRESHOLD, TRIM_THRESHOLD)
    except (OSError, AttributeError):
        return False
    _applied = bool(ok)
    return _applied
