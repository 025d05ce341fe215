"""Hierarchical distillation on a 2D toy problem: flow-matching teacher,
mean-velocity trajectory distillation, distribution matching and adversarial
refinement, built on a small numpy differentiation engine."""

import ctypes
import sys

__version__ = "0.1.0"


def _tune_allocator() -> None:
    # Activations of a few hundred KB sit just above glibc's default mmap
    # threshold, so every temporary would be mmapped and page-faulted.
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 64 << 20)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 128 << 20)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()
