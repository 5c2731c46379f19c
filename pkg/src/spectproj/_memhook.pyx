# cython: language_level=3
"""Counting allocator for numpy array buffers (test hook).

While a :class:`CountNumpyAllocations` block is active, every numpy data
allocation in the process goes through a handler that counts calls and
bytes before delegating to libc.
"""

from cpython.pycapsule cimport PyCapsule_New
from libc.stdint cimport uint8_t
from libc.stdlib cimport calloc, free, malloc, realloc
from libc.string cimport strncpy

cdef extern from "numpy/arrayobject.h":
    ctypedef struct PyDataMemAllocator:
        void* ctx
        void* (*malloc)(void* ctx, size_t size) noexcept nogil
        void* (*calloc)(void* ctx, size_t nelem, size_t elsize) noexcept nogil
        void* (*realloc)(void* ctx, void* ptr, size_t new_size) noexcept nogil
        void (*free)(void* ctx, void* ptr, size_t size) noexcept nogil

    ctypedef struct PyDataMem_Handler:
        char name[127]
        uint8_t version
        PyDataMemAllocator allocator

    object PyDataMem_SetHandler(object handler)
    void import_array()

import_array()

cdef size_t n_calls = 0
cdef size_t n_bytes = 0


cdef void* _malloc(void* ctx, size_t size) noexcept nogil:
    global n_calls, n_bytes
    n_calls += 1
    n_bytes += size
    return malloc(size)


cdef void* _calloc(void* ctx, size_t nelem, size_t elsize) noexcept nogil:
    global n_calls, n_bytes
    n_calls += 1
    n_bytes += nelem * elsize
    return calloc(nelem, elsize)


cdef void* _realloc(void* ctx, void* ptr, size_t new_size) noexcept nogil:
    global n_calls, n_bytes
    n_calls += 1
    n_bytes += new_size
    return realloc(ptr, new_size)


cdef void _free(void* ctx, void* ptr, size_t size) noexcept nogil:
    free(ptr)


cdef PyDataMem_Handler handler
strncpy(handler.name, b"spectproj_counting", 126)
handler.version = 1
handler.allocator.ctx = NULL
handler.allocator.malloc = _malloc
handler.allocator.calloc = _calloc
handler.allocator.realloc = _realloc
handler.allocator.free = _free
_capsule = PyCapsule_New(&handler, "mem_handler", NULL)


class CountNumpyAllocations:
    """Context manager; ``calls`` and ``nbytes`` hold the totals on exit."""

    def __enter__(self):
        global n_calls, n_bytes
        n_calls = 0
        n_bytes = 0
        self.calls = 0
        self.nbytes = 0
        self._old = PyDataMem_SetHandler(_capsule)
        return self

    def __exit__(self, *exc):
        PyDataMem_SetHandler(self._old)
        self.calls = n_calls
        self.nbytes = n_bytes
        return False
