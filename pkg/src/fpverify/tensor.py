"""Dense FP32 tensors, a counter-based RNG, and the binary tensor file format."""

from __future__ import annotations

import struct

import numpy as np

TENSOR_MAGIC = b"NAOT"
TENSOR_FILE_VERSION = 1
_DTYPE_CODES = {"fp32": 0, "fp64": 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class Tensor:
    """Immutable dense tensor: row-major FP32 payload plus optional FP64 shadow.

    The shadow is only ever populated by oracles and bound arithmetic; the
    payload is the single execution dtype.
    """

    __slots__ = ("shape", "data", "shadow")

    def __init__(self, shape, data, shadow=None, allow_nonfinite=False):
        shape = tuple(int(d) for d in shape)
        data = np.ascontiguousarray(data, dtype=np.float32).reshape(-1)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if n != data.size:
            raise ValueError(f"shape {shape} implies {n} elements, got {data.size}")
        if not allow_nonfinite and data.size and not np.all(np.isfinite(data)):
            raise ValueError("non-finite value in tensor payload")
        if shadow is not None:
            shadow = np.ascontiguousarray(shadow, dtype=np.float64).reshape(-1)
            if shadow.size != data.size:
                raise ValueError("shadow length does not match payload length")
            shadow.setflags(write=False)
        data.setflags(write=False)
        self.shape = shape
        self.data = data
        self.shadow = shadow

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def array(self) -> np.ndarray:
        """Payload viewed at its declared shape (read-only)."""
        return self.data.reshape(self.shape)

    def astype64(self) -> np.ndarray:
        return self.data.astype(np.float64).reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(
            self.data.view(np.uint32), other.data.view(np.uint32)
        )

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def tensor_new(shape, values, allow_nonfinite=False) -> Tensor:
    """Construct a Tensor from a flat value sequence; shadow left unset."""
    return Tensor(shape, np.asarray(values, dtype=np.float32), allow_nonfinite=allow_nonfinite)


def from_array(arr) -> Tensor:
    arr = np.asarray(arr)
    return Tensor(arr.shape, arr.astype(np.float32).reshape(-1))


def max_abs_diff(a: Tensor, b: Tensor) -> float:
    """Max elementwise |a - b|, accumulated in FP64."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    da = a.data.astype(np.float64)
    db = b.data.astype(np.float64)
    return float(np.max(np.abs(da - db)))


class Rng:
    """Counter-based RNG. Every draw derives a fresh Philox stream from
    (seed, counter), so identical (seed, counter) always yields identical
    values and streams can be forked without shared state."""

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed)
        self.counter = int(counter)

    def snapshot(self) -> tuple[int, int]:
        return (self.seed, self.counter)

    def fork(self) -> "Rng":
        """Split off an independent stream; advances this rng's counter."""
        child = Rng(self.seed, self.counter)
        self.counter += 1
        return child

    def _generator(self) -> np.random.Generator:
        # streams spaced 2**128 counter blocks apart; one stream per draw
        bits = np.random.Philox(key=self.seed, counter=self.counter << 128)
        return np.random.Generator(bits)

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> Tensor:
        if not lo < hi:
            raise ValueError(f"require lo < hi, got [{lo}, {hi})")
        gen = self._generator()
        self.counter += 1
        n = int(np.prod(tuple(shape), dtype=np.int64)) if tuple(shape) else 1
        vals = gen.random(n, dtype=np.float64) * (hi - lo) + lo
        return Tensor(shape, vals.astype(np.float32))

    def integers(self, lo: int, hi: int, size: int) -> np.ndarray:
        gen = self._generator()
        self.counter += 1
        return gen.integers(lo, hi, size=size)

    def permutation(self, n: int) -> np.ndarray:
        gen = self._generator()
        self.counter += 1
        return gen.permutation(n)

    def normal(self, shape, scale: float = 1.0) -> Tensor:
        gen = self._generator()
        self.counter += 1
        n = int(np.prod(tuple(shape), dtype=np.int64)) if tuple(shape) else 1
        vals = gen.standard_normal(n, dtype=np.float64) * scale
        return Tensor(shape, vals.astype(np.float32))


def rng_uniform(rng: Rng, shape, lo: float, hi: float) -> Tensor:
    """Deterministic uniform draw; advances the rng counter."""
    return rng.uniform(shape, lo, hi)


def write_tensor_file(path, arr: np.ndarray) -> None:
    """Binary tensor file: magic, u32 version, u8 dtype code, u32 rank,
    rank x u64 LE dims, then the little-endian IEEE-754 payload."""
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        code, dt = 0, np.dtype("<f4")
    elif arr.dtype == np.float64:
        code, dt = 1, np.dtype("<f8")
    else:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<IBI", TENSOR_FILE_VERSION, code, arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<Q", d))
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TENSOR_MAGIC:
            raise ValueError(f"bad magic {magic!r} in {path}")
        version, code, rank = struct.unpack("<IBI", fh.read(9))
        if version != TENSOR_FILE_VERSION:
            raise ValueError(f"unsupported tensor file version {version}")
        dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
        dt = _CODE_DTYPES.get(code)
        if dt is None:
            raise ValueError(f"unknown dtype code {code}")
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = fh.read(n * dt.itemsize)
        if len(payload) != n * dt.itemsize:
            raise ValueError("truncated tensor file")
        return np.frombuffer(payload, dtype=dt).reshape(dims).copy()


def save_tensor(path, t: Tensor) -> None:
    write_tensor_file(path, t.array)


def load_tensor(path) -> Tensor:
    arr = read_tensor_file(path)
    if arr.dtype == np.float64:
        return Tensor(arr.shape, arr.astype(np.float32), shadow=arr.reshape(-1))
    return Tensor(arr.shape, arr)
