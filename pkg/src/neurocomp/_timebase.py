"""Exact conversions between sample indices and integer-nanosecond timestamps."""
import numpy as np

NS_PER_S = 1_000_000_000


def _int_fs(fs_hz):
    f = float(fs_hz)
    return int(f) if f.is_integer() else None


def sample_to_ns(idx, fs_hz):
    """Sample index -> nearest integer nanosecond."""
    idx = np.asarray(idx, dtype=np.int64)
    fs = _int_fs(fs_hz)
    if fs is not None:
        return (2 * idx * NS_PER_S + fs) // (2 * fs)
    return np.rint(idx * (NS_PER_S / float(fs_hz))).astype(np.int64)


def ns_to_sample_round(t_ns, fs_hz):
    """Nearest sample index for each timestamp (ties round up)."""
    t = np.asarray(t_ns, dtype=np.int64)
    fs = _int_fs(fs_hz)
    if fs is not None:
        return (2 * t * fs + NS_PER_S) // (2 * NS_PER_S)
    return np.floor(t * (float(fs_hz) / NS_PER_S) + 0.5).astype(np.int64)


def ns_to_sample_floor(t_ns, fs_hz):
    """Index of the sample interval containing each timestamp.

    A half-nanosecond guard absorbs the rounding done by :func:`sample_to_ns`,
    so ``ns_to_sample_floor(sample_to_ns(i)) == i``.
    """
    t = np.asarray(t_ns, dtype=np.int64)
    fs = _int_fs(fs_hz)
    if fs is not None:
        return ((2 * t + 1) * fs) // (2 * NS_PER_S)
    return np.floor((t + 0.5) * (float(fs_hz) / NS_PER_S)).astype(np.int64)
