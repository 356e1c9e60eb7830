"""Counter-based, splittable random streams.

Every variate is a pure function of ``(seed, key path, index)``: a stream is
identified by a 64-bit hash of its key path and draws Gaussian variates by
running Philox4x32-10 on the counter ``(index, key hash)`` under the key
``seed``; each block yields four 32-bit uniforms, i.e. two Box-Muller
pairs.  Nothing depends on call order across streams, so particle loops can
be split into blocks and run on any number of threads with bit-identical
results.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

_GOLDEN64 = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def philox4x32(counter, key, rounds=10):
    """Philox4x32 block function, vectorized over leading axes.

    Args:
      counter: integer array of shape (..., 4) holding 32-bit words.
      key: integer array of shape (..., 2) holding 32-bit words; broadcasts
        against ``counter``.

    Returns:
      uint64 array of shape (..., 4) whose entries are 32-bit output words.
    """
    c = np.asarray(counter, dtype=np.uint64) & _MASK32
    k = np.asarray(key, dtype=np.uint64) & _MASK32
    c0, c1, c2, c3 = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
    k0, k1 = k[..., 0], k[..., 1]
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (p1 >> _SHIFT32) ^ c1 ^ k0, p1 & _MASK32, (p0 >> _SHIFT32) ^ c3 ^ k1, p0 & _MASK32
    return np.stack(np.broadcast_arrays(c0, c1, c2, c3), axis=-1)


def _splitmix(x):
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + _GOLDEN64
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _combine(parent, key):
    key = np.asarray(key, dtype=np.int64).astype(np.uint64)
    return _splitmix(np.uint64(parent) ^ _splitmix(key))


def _as_key_int(key):
    if isinstance(key, str):
        # stable across interpreter runs, unlike hash()
        h = 1469598103934665603
        for byte in key.encode("utf-8"):
            h = ((h ^ byte) * 1099511628211) % (1 << 64)
        return h - (1 << 64) if h >= (1 << 63) else h
    return int(key)


class RandomStream:
    """Keyed Gaussian stream.

    ``stream.spawn(k)`` derives an independent child; ``normal`` consumes the
    stream sequentially, ``normal_for`` evaluates many children at once
    without touching the parent's position.
    """

    def __init__(self, seed=0, _path_hash=None, _position=0):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self._hash = np.uint64(0x5EED if _path_hash is None else _path_hash)
        self._position = int(_position)

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, path=0x{int(self._hash):016x}, position={self._position})"

    @property
    def key_hash(self):
        return int(self._hash)

    def spawn(self, key):
        """Child stream for ``key`` (int or str)."""
        child = _combine(self._hash, _as_key_int(key))
        return RandomStream(self.seed, _path_hash=int(child))

    def normal(self, size=None):
        """Next ``size`` standard normals of this stream."""
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        out = _gaussians(self.seed, np.array([self._hash], dtype=np.uint64), self._position, count)
        self._position += count
        return out[0].reshape(shape)

    def normal_for(self, keys, count, offset=0):
        """Normals of the children ``spawn(k)`` for every ``k`` in ``keys``.

        Row ``i`` equals ``self.spawn(keys[i]).normal(offset + count)[offset:]``
        bit for bit.
        """
        keys = np.atleast_1d(np.asarray(keys, dtype=np.int64))
        hashes = _combine(self._hash, keys)
        return _gaussians(self.seed, hashes, int(offset), int(count))

    def uniform_for(self, keys, count, offset=0):
        """Uniforms of the children ``spawn(k)``, like ``normal_for``."""
        keys = np.atleast_1d(np.asarray(keys, dtype=np.int64))
        hashes = _combine(self._hash, keys)
        return _uniforms(self.seed, hashes, int(offset), int(count))

    def uniform(self, size=None):
        """Next ``size`` uniforms in (0, 1) (shares the position counter)."""
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        out = _uniforms(self.seed, np.array([self._hash], dtype=np.uint64), self._position, count)
        self._position += count
        return out[0].reshape(shape)


def _blocks(seed, hashes, first_block, n_blocks):
    idx = np.arange(first_block, first_block + n_blocks, dtype=np.uint64)
    counter = np.empty((hashes.size, n_blocks, 4), dtype=np.uint64)
    counter[..., 0] = idx & _MASK32
    counter[..., 1] = idx >> _SHIFT32
    counter[..., 2] = (hashes & _MASK32)[:, None]
    counter[..., 3] = (hashes >> _SHIFT32)[:, None]
    key = np.array([seed & 0xFFFFFFFF, seed >> 32], dtype=np.uint64)
    return philox4x32(counter, key)


_TWO_NEG_32 = 1.0 / 4294967296.0


def _unit(words):
    # (w + 1/2) / 2**32 lies strictly inside (0, 1)
    return (words.astype(np.float64) + 0.5) * _TWO_NEG_32


def _span(start, count):
    first = start // 4
    last = (start + count - 1) // 4
    return first, last - first + 1, start - 4 * first


def _gaussians(seed, hashes, start, count):
    hashes = np.asarray(hashes, dtype=np.uint64).ravel()
    if count == 0:
        return np.zeros((hashes.size, 0))
    first, n_blocks, lo = _span(start, count)
    u = _unit(_blocks(seed, hashes, first, n_blocks))
    radius = np.sqrt(-2.0 * np.log(u[..., 0::2]))
    angle = (2.0 * np.pi) * u[..., 1::2]
    out = np.empty(u.shape)
    out[..., 0::2] = radius * np.cos(angle)
    out[..., 1::2] = radius * np.sin(angle)
    return out.reshape(hashes.size, -1)[:, lo:lo + count]


def _uniforms(seed, hashes, start, count):
    hashes = np.asarray(hashes, dtype=np.uint64).ravel()
    if count == 0:
        return np.zeros((hashes.size, 0))
    first, n_blocks, lo = _span(start, count)
    u = _unit(_blocks(seed, hashes, first, n_blocks))
    return u.reshape(hashes.size, -1)[:, lo:lo + count]


def as_stream(rng, default_seed=0):
    """Accept a RandomStream, an int seed or None."""
    if rng is None:
        return RandomStream(default_seed)
    if isinstance(rng, (int, np.integer)):
        return RandomStream(int(rng))
    return rng
