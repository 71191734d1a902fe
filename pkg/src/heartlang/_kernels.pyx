# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures mirror ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport isfinite

cnp.import_array()


def repair_lead(const double[::1] x, int neighbors=6):
    """Replace non-finite samples with the mean of ``neighbors`` nearest finite ones.

    Returns ``(out, n_repaired)``; ``n_repaired == -1`` when fewer than
    ``neighbors`` finite samples exist.
    """
    cdef Py_ssize_t n = x.shape[0], i, j, lo, hi
    cdef int half = neighbors // 2, n_left, n_right, want_left, want_right, got
    cdef Py_ssize_t n_finite = 0, n_bad = 0
    cdef double acc
    out_arr = np.array(x, dtype=np.float64, copy=True)
    cdef double[::1] out = out_arr
    for i in range(n):
        if isfinite(x[i]):
            n_finite += 1
    if n_finite == n:
        return out_arr, 0
    if n_finite < neighbors:
        return out_arr, -1
    for i in range(n):
        if isfinite(x[i]):
            continue
        n_bad += 1
        # count finite samples available on each side, capped at ``neighbors``
        n_left = 0
        j = i - 1
        while j >= 0 and n_left < neighbors:
            if isfinite(x[j]):
                n_left += 1
            j -= 1
        n_right = 0
        j = i + 1
        while j < n and n_right < neighbors:
            if isfinite(x[j]):
                n_right += 1
            j += 1
        want_left = half if n_left >= half else n_left
        want_right = half if n_right >= half else n_right
        if want_left < half:
            want_right = neighbors - want_left
        elif want_right < half:
            want_left = neighbors - want_right
        acc = 0.0
        got = 0
        j = i - 1
        while j >= 0 and got < want_left:
            if isfinite(x[j]):
                acc += x[j]
                got += 1
            j -= 1
        got = 0
        j = i + 1
        while j < n and got < want_right:
            if isfinite(x[j]):
                acc += x[j]
                got += 1
            j += 1
        out[i] = acc / neighbors
    return out_arr, n_bad


def local_maxima(const double[::1] x):
    """Indices where the signal rises into a peak (plateaus report their first sample)."""
    cdef Py_ssize_t n = x.shape[0], i, j
    res = np.empty(max(n, 1), dtype=np.int64)
    cdef cnp.int64_t[::1] r = res
    cdef Py_ssize_t m = 0
    i = 1
    while i < n - 1:
        if x[i] > x[i - 1]:
            j = i
            while j < n - 1 and x[j + 1] == x[i]:
                j += 1
            if j < n - 1 and x[j + 1] < x[i]:
                r[m] = i
                m += 1
            i = j + 1
        else:
            i += 1
    return res[:m].copy()


def scan_peaks(const double[::1] heights, const cnp.int64_t[::1] positions,
               long refractory, double init_threshold, double floor,
               double keep=0.75, double signal_ratio=0.5,
               double noise_decay=0.875, int window=8, double searchback=1.66,
               long twave_window=0, double twave_ratio=0.0):
    """Adaptive-threshold acceptance over candidate maxima, in time order.

    Returns the accepted positions as an int64 array.
    """
    cdef Py_ssize_t n = heights.shape[0], i, k
    acc_pos = np.empty(max(n, 1), dtype=np.int64)
    acc_h = np.empty(max(n, 1), dtype=np.float64)
    cdef cnp.int64_t[::1] ap = acc_pos
    cdef double[::1] ah = acc_h
    cdef Py_ssize_t m = 0
    cdef double thr = init_threshold, npk = 0.0, spk, rr
    cdef double h, best_h = -1.0
    cdef long pos, best_pos = -1
    for i in range(n):
        h = heights[i]
        pos = positions[i]
        if m > 0 and pos - ap[m - 1] < refractory:
            if h > ah[m - 1]:
                ap[m - 1] = pos
                ah[m - 1] = h
            continue
        if m >= 2 and best_pos >= 0:
            rr = 0.0
            k = m - 1
            while k > 0 and k > m - 1 - window:
                rr += ap[k] - ap[k - 1]
                k -= 1
            rr /= (m - 1 - k)
            if pos - ap[m - 1] > searchback * rr:
                ap[m] = best_pos
                ah[m] = best_h
                m += 1
                best_pos = -1
                best_h = -1.0
                if pos - ap[m - 1] < refractory:
                    if h > ah[m - 1]:
                        ap[m - 1] = pos
                        ah[m - 1] = h
                    continue
        if (h > thr and h > floor and not
                (m > 0 and pos - ap[m - 1] < twave_window and h < twave_ratio * ah[m - 1])):
            ap[m] = pos
            ah[m] = h
            m += 1
            best_pos = -1
            best_h = -1.0
            spk = 0.0
            k = m - 1
            while k >= 0 and k > m - 1 - window:
                spk += ah[k]
                k -= 1
            spk /= (m - 1 - k)
            thr = keep * thr + (1.0 - keep) * (npk + signal_ratio * (spk - npk))
        else:
            npk = noise_decay * npk + (1.0 - noise_decay) * h
            if h > 0.5 * thr and h > floor and h > best_h:
                best_h = h
                best_pos = pos
    return acc_pos[:m].copy()


def midranks(const double[::1] sorted_values):
    """1-based ranks for already-sorted values, ties receiving their average rank."""
    cdef Py_ssize_t n = sorted_values.shape[0], i = 0, j, k
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] r = out
    cdef double avg
    while i < n:
        j = i
        while j + 1 < n and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        avg = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            r[k] = avg
        i = j + 1
    return out


def segment_sum(const double[:, ::1] values, const cnp.int64_t[::1] index, Py_ssize_t k):
    """Row sums and counts grouped by ``index`` into ``k`` buckets."""
    cdef Py_ssize_t n = values.shape[0], d = values.shape[1], i, j, g
    sums = np.zeros((k, d), dtype=np.float64)
    counts = np.zeros(k, dtype=np.float64)
    cdef double[:, ::1] s = sums
    cdef double[::1] c = counts
    for i in range(n):
        g = index[i]
        c[g] += 1.0
        for j in range(d):
            s[g, j] += values[i, j]
    return sums, counts


def varint_encode(const cnp.int64_t[::1] values):
    """Unsigned LEB128 encoding of non-negative integers."""
    cdef Py_ssize_t n = values.shape[0], i, m = 0
    cdef unsigned long long v
    buf = bytearray(10 * n)
    cdef unsigned char[::1] b = buf
    for i in range(n):
        v = <unsigned long long> values[i]
        while v >= 0x80:
            b[m] = <unsigned char> ((v & 0x7F) | 0x80)
            m += 1
            v >>= 7
        b[m] = <unsigned char> v
        m += 1
    return bytes(buf[:m])


def varint_decode(const unsigned char[::1] data, Py_ssize_t count):
    """Decode ``count`` LEB128 integers; returns ``(values, bytes_consumed)``."""
    cdef Py_ssize_t n = data.shape[0], i, m = 0
    cdef unsigned long long v
    cdef int shift
    out = np.empty(count, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    for i in range(count):
        v = 0
        shift = 0
        while True:
            if m >= n:
                raise ValueError("truncated varint stream")
            v |= (<unsigned long long> (data[m] & 0x7F)) << shift
            shift += 7
            m += 1
            if not (data[m - 1] & 0x80):
                break
        o[i] = <cnp.int64_t> v
    return out, m
