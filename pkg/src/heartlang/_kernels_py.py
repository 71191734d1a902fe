"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def repair_lead(x, neighbors=6):
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    finite = np.isfinite(x)
    if finite.all():
        return out, 0
    if finite.sum() < neighbors:
        return out, -1
    good = np.flatnonzero(finite)
    half = neighbors // 2
    n_bad = 0
    for i in np.flatnonzero(~finite):
        n_bad += 1
        split = np.searchsorted(good, i)
        left = good[:split][::-1]
        right = good[split:]
        want_left = min(half, len(left))
        want_right = min(half, len(right))
        if want_left < half:
            want_right = neighbors - want_left
        elif want_right < half:
            want_left = neighbors - want_right
        picked = list(left[:want_left]) + list(right[:want_right])
        out[i] = sum(x[j] for j in picked) / neighbors
    return out, n_bad


def local_maxima(x):
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    res = []
    i = 1
    while i < n - 1:
        if x[i] > x[i - 1]:
            j = i
            while j < n - 1 and x[j + 1] == x[i]:
                j += 1
            if j < n - 1 and x[j + 1] < x[i]:
                res.append(i)
            i = j + 1
        else:
            i += 1
    return np.asarray(res, dtype=np.int64)


def scan_peaks(heights, positions, refractory, init_threshold, floor,
               keep=0.75, signal_ratio=0.5, noise_decay=0.875, window=8,
               searchback=1.66, twave_window=0, twave_ratio=0.0):
    ap, ah = [], []
    thr = init_threshold
    npk = 0.0
    best_pos, best_h = -1, -1.0
    for h, pos in zip(heights, positions):
        h = float(h)
        pos = int(pos)
        if ap and pos - ap[-1] < refractory:
            if h > ah[-1]:
                ap[-1], ah[-1] = pos, h
            continue
        if len(ap) >= 2 and best_pos >= 0:
            gaps = np.diff(ap[-(window + 1):])
            rr = float(np.mean(gaps))
            if pos - ap[-1] > searchback * rr:
                ap.append(best_pos)
                ah.append(best_h)
                best_pos, best_h = -1, -1.0
                if pos - ap[-1] < refractory:
                    if h > ah[-1]:
                        ap[-1], ah[-1] = pos, h
                    continue
        if (h > thr and h > floor and not
                (ap and pos - ap[-1] < twave_window and h < twave_ratio * ah[-1])):
            ap.append(pos)
            ah.append(h)
            best_pos, best_h = -1, -1.0
            spk = float(np.mean(ah[-window:]))
            thr = keep * thr + (1.0 - keep) * (npk + signal_ratio * (spk - npk))
        else:
            npk = noise_decay * npk + (1.0 - noise_decay) * h
            if h > 0.5 * thr and h > floor and h > best_h:
                best_pos, best_h = pos, h
    return np.asarray(ap, dtype=np.int64)


def midranks(sorted_values):
    v = np.asarray(sorted_values, dtype=np.float64)
    n = len(v)
    out = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and v[j + 1] == v[i]:
            j += 1
        out[i:j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    return out


def segment_sum(values, index, k):
    values = np.asarray(values, dtype=np.float64)
    sums = np.zeros((k, values.shape[1]), dtype=np.float64)
    counts = np.zeros(k, dtype=np.float64)
    np.add.at(sums, index, values)
    np.add.at(counts, index, 1.0)
    return sums, counts


def varint_encode(values):
    out = bytearray()
    for v in np.asarray(values, dtype=np.int64):
        v = int(v)
        while v >= 0x80:
            out.append((v & 0x7F) | 0x80)
            v >>= 7
        out.append(v)
    return bytes(out)


def varint_decode(data, count):
    data = bytes(data)
    out = np.empty(count, dtype=np.int64)
    m = 0
    for i in range(count):
        v = 0
        shift = 0
        while True:
            if m >= len(data):
                raise ValueError("truncated varint stream")
            byte = data[m]
            v |= (byte & 0x7F) << shift
            shift += 7
            m += 1
            if not byte & 0x80:
                break
        out[i] = v
    return out, m
