"""
Binary containers. All integers and floats are little-endian.

  TVSD  dataset:        magic, u32 version, u32 kind, u64 N, u64 D, f64[N*D] Y,
                        u32 has_truth [, str model_kind, u64 H, u64[N*words] states, arrays]
  TVSK  state sets:     magic, u32 version, u64 N, u64 H, u64 S, u64[N*S*words]
  TVSP  model params:   magic, u32 version, str kind, arrays
  TVSA  amortizer net:  magic, u32 version, u64 D, u64 hidden, u64 H, f64 W1, b1, W2, b2

``arrays`` is u32 count then per array: str name, u32 ndim, u64 dims, f64 data
(row-major); ``str`` is u32 length then UTF-8 bytes.
"""
import struct
from pathlib import Path

import numpy as np

from services.errors import CorruptFileError
from utils.file_utils import atomic_write_bytes

VERSION = 1

DATASET_MAGIC = b"TVSD"
KSETS_MAGIC = b"TVSK"
PARAMS_MAGIC = b"TVSP"
NET_MAGIC = b"TVSA"


class _Writer:
    def __init__(self, magic: bytes):
        self.parts = [magic, struct.pack("<I", VERSION)]

    def u32(self, value):
        self.parts.append(struct.pack("<I", int(value)))

    def u64(self, value):
        self.parts.append(struct.pack("<Q", int(value)))

    def text(self, value: str):
        raw = value.encode("utf-8")
        self.u32(len(raw))
        self.parts.append(raw)

    def f64(self, array):
        self.parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())

    def words(self, array):
        self.parts.append(np.ascontiguousarray(array, dtype="<u8").tobytes())

    def arrays(self, named: dict):
        self.u32(len(named))
        for name, array in named.items():
            array = np.asarray(array, dtype=np.float64)
            self.text(name)
            self.u32(array.ndim)
            for dim in array.shape:
                self.u64(dim)
            self.f64(array)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, magic: bytes, source):
        self.data = data
        self.pos = 0
        self.source = source
        found = self._take(len(magic))
        if found != magic:
            raise CorruptFileError(f"{source}: bad magic {found!r}, expected {magic!r}")
        version = self.u32()
        if version != VERSION:
            raise CorruptFileError(f"{source}: unsupported version {version}")

    def _take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptFileError(f"{self.source}: truncated file (needed {n} bytes at offset {self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def text(self) -> str:
        return self._take(self.u32()).decode("utf-8")

    def f64(self, count: int, shape=None) -> np.ndarray:
        array = np.frombuffer(self._take(8 * count), dtype="<f8").astype(np.float64)
        return array.reshape(shape) if shape is not None else array

    def words(self, count: int, shape=None) -> np.ndarray:
        array = np.frombuffer(self._take(8 * count), dtype="<u8").astype(np.uint64)
        return array.reshape(shape) if shape is not None else array

    def arrays(self) -> dict:
        named = {}
        for _ in range(self.u32()):
            name = self.text()
            shape = tuple(self.u64() for _ in range(self.u32()))
            named[name] = self.f64(int(np.prod(shape, dtype=np.int64)), shape)
        return named

    def finish(self):
        if self.pos != len(self.data):
            raise CorruptFileError(f"{self.source}: {len(self.data) - self.pos} trailing bytes")


def _read(path, magic) -> _Reader:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return _Reader(path.read_bytes(), magic, path)


# -------------------------------------------------
# Datasets
# -------------------------------------------------
def write_dataset(path, Y, kind_code: int, truth=None) -> Path:
    """truth: None or (model_kind, states (N, H) uint8, named param arrays)."""
    from services.engine import pack_states

    Y = np.asarray(Y, dtype=np.float64)
    out = _Writer(DATASET_MAGIC)
    out.u32(kind_code)
    out.u64(Y.shape[0])
    out.u64(Y.shape[1])
    out.f64(Y)
    if truth is None:
        out.u32(0)
    else:
        model_kind, states, params = truth
        out.u32(1)
        out.text(model_kind)
        out.u64(states.shape[1])
        out.words(pack_states(states))
        out.arrays(params)
    return atomic_write_bytes(path, out.getvalue())


def read_dataset(path):
    """Returns (Y, kind_code, truth) with truth as in write_dataset."""
    from services.engine import n_words, unpack_states

    src = _read(path, DATASET_MAGIC)
    kind_code = src.u32()
    n_rows, n_cols = src.u64(), src.u64()
    Y = src.f64(n_rows * n_cols, (n_rows, n_cols))
    truth = None
    if src.u32():
        model_kind = src.text()
        H = src.u64()
        words = src.words(n_rows * n_words(H), (n_rows, n_words(H)))
        truth = (model_kind, unpack_states(words, H), src.arrays())
    src.finish()
    return Y, kind_code, truth


# -------------------------------------------------
# State sets
# -------------------------------------------------
def write_ksets(path, states: np.ndarray) -> Path:
    from services.engine import pack_states

    n_rows, capacity, H = states.shape
    out = _Writer(KSETS_MAGIC)
    out.u64(n_rows)
    out.u64(H)
    out.u64(capacity)
    out.words(pack_states(states))
    return atomic_write_bytes(path, out.getvalue())


def read_ksets(path) -> np.ndarray:
    from services.engine import n_words, unpack_states

    src = _read(path, KSETS_MAGIC)
    n_rows, H, capacity = src.u64(), src.u64(), src.u64()
    words = src.words(n_rows * capacity * n_words(H), (n_rows, capacity, n_words(H)))
    src.finish()
    return unpack_states(words, H)


# -------------------------------------------------
# Model parameters
# -------------------------------------------------
def write_params(path, kind: str, arrays: dict) -> Path:
    out = _Writer(PARAMS_MAGIC)
    out.text(kind)
    out.arrays(arrays)
    return atomic_write_bytes(path, out.getvalue())


def read_params(path):
    """Returns (kind, named arrays)."""
    src = _read(path, PARAMS_MAGIC)
    kind = src.text()
    arrays = src.arrays()
    src.finish()
    return kind, arrays


# -------------------------------------------------
# Amortizer
# -------------------------------------------------
def write_net(path, net) -> Path:
    out = _Writer(NET_MAGIC)
    out.u64(net.n_inputs)
    out.u64(net.n_hidden)
    out.u64(net.n_latents)
    for block in (net.W1, net.b1, net.W2, net.b2):
        out.f64(block)
    return atomic_write_bytes(path, out.getvalue())


def read_net(path):
    from services.amortizer import AmortizerNet

    src = _read(path, NET_MAGIC)
    D, hidden, H = src.u64(), src.u64(), src.u64()
    net = AmortizerNet(
        W1=src.f64(hidden * D, (hidden, D)),
        b1=src.f64(hidden),
        W2=src.f64(H * hidden, (H, hidden)),
        b2=src.f64(H),
    )
    src.finish()
    return net
