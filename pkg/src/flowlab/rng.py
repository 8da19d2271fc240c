"""Deterministic random streams with labeled substreams.

Streams are backed by the Philox counter-based bit generator.  The 128-bit
Philox key is derived from SHA-256 over the root seed and the chain of
substream labels, so the same seed reproduces bit-identical draws on every
platform, and independent components of a run can pull from independent
streams by name (``rng.substream("teacher/data")``).
"""

from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    """A named, reproducible random stream."""

    def __init__(self, seed: int, _material: bytes | None = None):
        self.seed = int(seed)
        if _material is None:
            _material = f"flowlab:{self.seed}".encode()
        self._material = _material
        key = np.frombuffer(hashlib.sha256(_material).digest()[:16], dtype="<u8")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, label: str) -> "Rng":
        """Derive an independent stream; same (seed, labels) => same draws."""
        return Rng(self.seed, self._material + b"/" + label.encode())

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        """JSON-serializable snapshot of the stream position."""
        state = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "material": self._material.decode(),
            "counter": [int(x) for x in state["state"]["counter"]],
            "key": [int(x) for x in state["state"]["key"]],
            "buffer": [int(x) for x in state["buffer"]],
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    def set_state(self, snap: dict) -> None:
        self.seed = int(snap["seed"])
        self._material = snap["material"].encode()
        state = self._gen.bit_generator.state
        state["state"]["counter"] = np.array(snap["counter"], dtype=np.uint64)
        state["state"]["key"] = np.array(snap["key"], dtype=np.uint64)
        state["buffer"] = np.array(snap["buffer"], dtype=np.uint64)
        state["buffer_pos"] = snap["buffer_pos"]
        state["has_uint32"] = snap["has_uint32"]
        state["uinteger"] = snap["uinteger"]
        self._gen.bit_generator.state = state
