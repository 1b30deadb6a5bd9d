"""Deterministic dense kernels and the counter-based random stream.

Everything downstream (cells, models, the classifier) is built on the few
operations here.  Matrices are row-major ``numpy`` arrays; the training
precision is float32 and gradient verification runs in float64, selected by
passing ``dtype``.  All kernels use a fixed accumulation order, so serial and
worker-parallel runs agree bit-exactly.
"""

from __future__ import annotations

import numpy as np

# Training / verification precisions.  Everything parameter-shaped is created
# through one of these so a whole model lives in a single dtype.
F32 = np.float32
F64 = np.float64

Matrix = np.ndarray  # 2-D, row-major
Vector = np.ndarray  # 1-D


def _splitmix64(x: int) -> int:
    """One round of splitmix64; used to derive independent child seeds."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


class Rng:
    """Counter-based random stream (Philox) with cheap uncorrelated splits.

    Identical seed gives an identical sample stream regardless of platform or
    of how many worker threads are running; ``split`` derives a child stream
    whose draws are uncorrelated with the parent, so every ensemble member can
    own its own stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, index: int) -> "Rng":
        """Child stream ``index``; deterministic in (seed, index)."""
        return Rng(_splitmix64(self.seed ^ _splitmix64(index)))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def normal(self, loc: float, scale: float, shape) -> np.ndarray:
        return self._gen.normal(loc, scale, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def get_state(self) -> dict:
        """Serializable snapshot; pair with :meth:`set_state`."""
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, snap: dict) -> None:
        self.seed = int(snap["seed"])
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))
        st = self._gen.bit_generator.state
        st["state"]["counter"] = np.array(snap["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(snap["key"], dtype=np.uint64)
        st["buffer"] = np.array(snap["buffer"], dtype=np.uint64)
        st["buffer_pos"] = int(snap["buffer_pos"])
        st["has_uint32"] = int(snap["has_uint32"])
        st["uinteger"] = int(snap["uinteger"])
        self._gen.bit_generator.state = st


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with shape validation.

    Accumulation order is numpy's fixed loop order for the given shapes, so
    repeated calls reproduce bit-exactly.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function, overflow-safe in both tails."""
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product; operands must have equal shapes."""
    if a.shape != b.shape:
        raise ValueError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def uniform_init(rng: Rng, rows: int, cols: int, scale: float, dtype=F32) -> Matrix:
    """I.i.d. uniform entries in [-scale, +scale], reproducible from seed.

    Drawn in float64 and cast, so the float32 and float64 variants of one
    seed agree to rounding.
    """
    if scale <= 0:
        raise ValueError(f"uniform_init scale must be > 0, got {scale}")
    return rng.uniform(-scale, scale, (rows, cols)).astype(dtype)


def uniform_init_vector(rng: Rng, n: int, scale: float, dtype=F32) -> Vector:
    if scale <= 0:
        raise ValueError(f"uniform_init scale must be > 0, got {scale}")
    return rng.uniform(-scale, scale, (n,)).astype(dtype)
