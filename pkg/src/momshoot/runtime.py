"""Process-wide cap on internal parallelism (CLI --threads)."""

import os

_threads = None


def set_threads(n):
    global _threads
    if n is not None and n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = n


def thread_count():
    if _threads is not None:
        return _threads
    return os.cpu_count() or 1
