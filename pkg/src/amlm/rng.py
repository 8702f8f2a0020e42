"""Named, reproducible random streams derived from one 64-bit seed.

Every component draws from its own stream so it can be tested alone and
still compose deterministically. A stream is a numpy ``Generator`` over
PCG64 seeded by ``SeedSequence([seed_lo, seed_hi, name_hash, *extra])``
where ``name_hash`` is the first 8 bytes (big-endian) of SHA-256 of the
stream name. Names used by the training loop:

``init``     parameter initialisation (seeds a torch generator)
``data``     per-epoch shuffling (``extra = (epoch,)``)
``mask``     position selection and 80/10/10 corruption actions
``dropout``  dropout masks (seeds a torch generator)
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MASK64 = (1 << 64) - 1
MASK128 = (1 << 128) - 1

# state(u128) inc(u128) has_uint32(u32) uinteger(u32)
RNG_STATE_BYTES = 40


def _name_hash(name: str) -> int:
    if not name:
        raise ValueError("stream name must be non-empty")
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "big")


def seed_sequence(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    seed &= MASK64
    entropy = [seed & 0xFFFFFFFF, seed >> 32, _name_hash(name), *(int(e) for e in extra)]
    return np.random.SeedSequence(entropy)


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return a fresh generator for the named sub-stream."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, name, *extra)))


def child_seed(seed: int, name: str, *extra: int) -> int:
    """A 63-bit integer seed for libraries that want a plain int (torch)."""
    return int(seed_sequence(seed, name, *extra).generate_state(1, np.uint64)[0]) & ((1 << 63) - 1)


def pack_state(rng: np.random.Generator) -> bytes:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise TypeError(f"cannot serialise {st['bit_generator']} state")
    s, inc = st["state"]["state"], st["state"]["inc"]
    return struct.pack(
        "<QQQQII",
        s & MASK64, s >> 64,
        inc & MASK64, inc >> 64,
        int(st["has_uint32"]), int(st["uinteger"]),
    )


def unpack_state(buf: bytes) -> np.random.Generator:
    if len(buf) != RNG_STATE_BYTES:
        raise ValueError(f"rng state must be {RNG_STATE_BYTES} bytes, got {len(buf)}")
    s_lo, s_hi, i_lo, i_hi, has, uint = struct.unpack("<QQQQII", buf)
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": s_lo | (s_hi << 64), "inc": i_lo | (i_hi << 64)},
        "has_uint32": has,
        "uinteger": uint,
    }
    return np.random.Generator(bg)
