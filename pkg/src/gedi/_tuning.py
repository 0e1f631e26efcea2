"""Process-level allocator tuning.

The training loops create many short-lived numpy temporaries above glibc's
default 128 KiB mmap threshold; each one is then mapped and unmapped,
which makes every downstream matmul fault in cold pages and dominates the
runtime. Raising the thresholds keeps those temporaries on the heap.
"""

import ctypes

M_TRIM_THRESHOLD = -1
M_MMAP_THRESHOLD = -3


def tune_allocator() -> bool:
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)
        return True
    except (OSError, AttributeError):
        return False
