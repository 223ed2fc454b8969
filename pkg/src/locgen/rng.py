"""Splittable, counter-based random streams.

Every random decision in the package is keyed by ``(seed, *path)``. Streams
with different paths are independent, and a stream's output never depends on
how many other streams were consumed before it, which keeps batched and
reordered work reproducible.

Two flavours share the same key derivation:

* :func:`substream` returns a numpy ``Generator`` (Philox-4x64) for
  general-purpose sequential use (scene layout, batch selection, pairing).
* :func:`counter_uniforms` is a vectorised Philox-4x32-10 block cipher, used
  where thousands of tiny independent streams are needed at once (one per
  sampled box).
"""

from __future__ import annotations

import hashlib

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_LO = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)


def _word(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream keys must be non-negative, got {part}")
        return int(part)
    digest = hashlib.blake2b(str(part).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream_key(seed: int, *path) -> int:
    """64-bit key naming the stream ``path`` under ``seed``."""
    h = hashlib.blake2b(digest_size=8)
    for p in (seed, *path):
        h.update(_word(p).to_bytes(16, "little", signed=False))
    return int.from_bytes(h.digest(), "little")


def substream(seed: int, *path) -> np.random.Generator:
    """Independent generator for the stream named by ``path`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=_word(seed), spawn_key=tuple(_word(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def philox4x32(counters: np.ndarray, key: tuple[int, int], rounds: int = 10) -> np.ndarray:
    """Philox-4x32 block function. ``counters`` is (N, 4) uint32; returns (N, 4) uint32."""
    c = np.asarray(counters, dtype=np.uint32)
    c0, c1, c2, c3 = (c[:, i].astype(np.uint64) for i in range(4))
    k0, k1 = np.uint32(key[0]), np.uint32(key[1])
    for r in range(rounds):
        if r:
            k0 = np.uint32((int(k0) + int(_W0)) & 0xFFFFFFFF)
            k1 = np.uint32((int(k1) + int(_W1)) & 0xFFFFFFFF)
        p0 = _M0 * c0
        p1 = _M1 * c2
        n0 = (p1 >> _SHIFT) ^ c1 ^ np.uint64(k0)
        n1 = p1 & _LO
        n2 = (p0 >> _SHIFT) ^ c3 ^ np.uint64(k1)
        n3 = p0 & _LO
        c0, c1, c2, c3 = n0, n1, n2, n3
    return np.stack([c0, c1, c2, c3], axis=1).astype(np.uint32)


def counter_uniforms(seed: int, path: tuple, indices, n: int = 4) -> np.ndarray:
    """(len(indices), n) uniforms in [0, 1); row r depends only on (seed, path, indices[r]).

    Each index owns its own counter block(s), so slicing or permuting the
    index list slices or permutes the rows.
    """
    key = stream_key(seed, *path)
    key2 = (key & 0xFFFFFFFF, key >> 32)
    idx = np.asarray(list(indices), dtype=np.uint64)
    blocks = -(-n // 4)
    out = np.empty((len(idx), blocks * 4))
    for b in range(blocks):
        ctr = np.zeros((len(idx), 4), dtype=np.uint32)
        ctr[:, 0] = (idx & _LO).astype(np.uint32)
        ctr[:, 1] = (idx >> _SHIFT).astype(np.uint32)
        ctr[:, 2] = b
        out[:, b * 4:(b + 1) * 4] = philox4x32(ctr, key2) * (1.0 / 2.0**32)
    return out[:, :n]
