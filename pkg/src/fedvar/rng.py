"""Counter-based, splittable normal variates.

A key is a seed plus a path of 64-bit labels. Its 64-bit key word is obtained
by folding the path through Philox4x32-10 (each step encrypts the label under
the parent word). Variates for a key are Philox outputs at counters
``0, 1, 2, ...`` mapped to uniforms and then through the inverse normal CDF,
so the ``i``-th variate of a stream never depends on how many other streams
were consumed or in which order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import ndtri

_M32 = np.uint64(0xFFFFFFFF)
_MUL0 = np.uint64(0xD2511F53)
_MUL1 = np.uint64(0xCD9E8D57)
_WEYL0 = np.uint64(0x9E3779B9)
_WEYL1 = np.uint64(0xBB67AE85)
_DERIVE_TAG = np.uint64(0x5D3A7F19)  # counter word 2 reserved for key derivation

MASK64 = (1 << 64) - 1


def philox4x32(key: np.ndarray, counter: np.ndarray, rounds: int = 10) -> np.ndarray:
    """Vectorised Philox4x32 block function.

    ``key`` has shape ``(..., 2)`` and ``counter`` shape ``(..., 4)``; both hold
    32-bit words in uint64 containers and broadcast against each other.
    Returns the ``(..., 4)`` output words.
    """
    key = np.asarray(key, dtype=np.uint64)
    ctr = np.asarray(counter, dtype=np.uint64)
    shape = np.broadcast_shapes(key.shape[:-1], ctr.shape[:-1])
    k0, k1 = key[..., 0], key[..., 1]
    c0, c1, c2, c3 = ctr[..., 0], ctr[..., 1], ctr[..., 2], ctr[..., 3]
    for r in range(rounds):
        p0 = _MUL0 * c0
        p1 = _MUL1 * c2
        c0, c1, c2, c3 = (
            (p1 >> np.uint64(32)) ^ c1 ^ k0,
            p1 & _M32,
            (p0 >> np.uint64(32)) ^ c3 ^ k1,
            p0 & _M32,
        )
        if r + 1 < rounds:
            k0 = (k0 + _WEYL0) & _M32
            k1 = (k1 + _WEYL1) & _M32
    out = np.empty(shape + (4,), dtype=np.uint64)
    out[..., 0], out[..., 1], out[..., 2], out[..., 3] = c0, c1, c2, c3
    return out


def _philox_scalar(k0: int, k1: int, c: list[int], rounds: int = 10) -> list[int]:
    # pure-int twin of philox4x32 for single blocks; avoids numpy call overhead
    c0, c1, c2, c3 = c
    for r in range(rounds):
        p0 = 0xD2511F53 * c0
        p1 = 0xCD9E8D57 * c2
        c0, c1, c2, c3 = (p1 >> 32) ^ c1 ^ k0, p1 & 0xFFFFFFFF, (p0 >> 32) ^ c3 ^ k1, p0 & 0xFFFFFFFF
        if r + 1 < rounds:
            k0 = (k0 + 0x9E3779B9) & 0xFFFFFFFF
            k1 = (k1 + 0xBB67AE85) & 0xFFFFFFFF
    return [c0, c1, c2, c3]


def _derive_word(parent: int, lab: int) -> int:
    out = _philox_scalar(
        parent & 0xFFFFFFFF, parent >> 32, [lab & 0xFFFFFFFF, lab >> 32, int(_DERIVE_TAG), 1]
    )
    return ((out[1] ^ out[3]) << 32) | (out[0] ^ out[2])


def _split64(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    return np.stack([x & _M32, x >> np.uint64(32)], axis=-1)


def _join64(lo, hi) -> np.ndarray:
    return (np.asarray(hi, dtype=np.uint64) << np.uint64(32)) | np.asarray(lo, dtype=np.uint64)


def _derive_words(parent_words, labels) -> np.ndarray:
    labels = _split64(labels)
    zeros = np.zeros(labels.shape[:-1], dtype=np.uint64)
    ctr = np.stack([labels[..., 0], labels[..., 1], zeros + _DERIVE_TAG, zeros + np.uint64(1)], axis=-1)
    out = philox4x32(_split64(parent_words), ctr)
    return _join64(out[..., 0] ^ out[..., 2], out[..., 1] ^ out[..., 3])


def label(name: str) -> int:
    """Stable 64-bit label for a textual stream name such as ``"global"``."""
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


GLOBAL = label("global")
LOCAL = label("local")


@dataclass(frozen=True)
class RngKey:
    seed: int
    stream: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        stream = tuple(int(s) for s in self.stream)
        if any(not 0 <= s <= MASK64 for s in stream):
            raise ValueError("stream labels must be 64-bit unsigned integers")
        object.__setattr__(self, "stream", stream)

    @cached_property
    def word(self) -> int:
        w = self.seed
        for lab in self.stream:
            w = _derive_word(w, lab)
        return w

    def derive(self, *labels: int | str) -> "RngKey":
        labs = tuple(label(x) if isinstance(x, str) else int(x) for x in labels)
        child = RngKey(self.seed, self.stream + labs)
        w = self.word
        for lab in labs:
            w = _derive_word(w, lab)
        child.__dict__["word"] = w
        return child


def derive(key: RngKey, lab: int | str) -> RngKey:
    return key.derive(lab)


def _normals_from_words(words: np.ndarray, n: int) -> np.ndarray:
    nblocks = (n + 1) // 2
    blocks = np.arange(nblocks, dtype=np.uint64)
    zeros = np.zeros_like(blocks)
    ctr = np.stack([blocks, zeros, zeros, zeros], axis=-1)
    keys = _split64(words)[..., None, :]
    out = philox4x32(keys, ctr)
    bits = np.stack(
        [_join64(out[..., 0], out[..., 1]), _join64(out[..., 2], out[..., 3])], axis=-1
    ).reshape(*out.shape[:-2], 2 * nblocks)[..., :n]
    u = ((bits >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53
    return ndtri(u)


def std_normal(key: RngKey, n: int) -> np.ndarray:
    """``n`` i.i.d. standard normals, a pure function of ``key``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return _normals_from_words(np.uint64(key.word), n)


def std_normal_rows(parent: RngKey, labels, n: int) -> np.ndarray:
    """Row ``i`` equals ``std_normal(parent.derive(labels[i]), n)``.

    Vectorised so per-observation noise for thousands of units costs one call.
    """
    labels = np.asarray(labels, dtype=np.uint64).reshape(-1)
    if n == 0 or labels.size == 0:
        return np.zeros((labels.size, n))
    words = _derive_words(np.uint64(parent.word), labels)
    return _normals_from_words(words, n)
