"""KV storage: block-paged per-request context caches and the immutable
shared system cache, plus position-offset bookkeeping.

Context KVs live in fixed-size blocks drawn from a bounded pool; each
request owns a disjoint ordered block table shared by all layers (a token
occupies the same block slot in every layer). The system cache is filled
once before serving and never mutated.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from relayserve.errors import CapacityError, ContractError, DimensionError

DEFAULT_BLOCK_SIZE = 16

_MAGIC = b"RELAYKV\x00"
_VERSION = 1


def context_position(token_index_in_context, s):
    """Absolute position of a context token stored after a shared prefix
    of length s: token_index + s."""
    if token_index_in_context < 0:
        raise ContractError(
            f"token index must be >= 0, got {token_index_in_context}")
    if s < 0:
        raise ContractError(f"prefix length must be >= 0, got {s}")
    return token_index_in_context + s


@dataclass(frozen=True)
class SystemKvCache:
    """Per-layer key/value tensors of the shared system prompt.

    keys[layer] and values[layer] are (s, h, d) arrays, identical for every
    request that shares prompt_id. Arrays are marked read-only.
    """

    keys: tuple
    values: tuple
    system_len: int
    prompt_id: str

    def __post_init__(self):
        if self.system_len < 1:
            raise ContractError("system cache must hold at least one token")
        if len(self.keys) != len(self.values):
            raise DimensionError("keys/values must have one entry per layer")
        for k, v in zip(self.keys, self.values):
            if k.shape != v.shape or k.shape[0] != self.system_len:
                raise DimensionError(
                    f"layer shapes inconsistent: {k.shape} vs {v.shape}")
            k.flags.writeable = False
            v.flags.writeable = False

    @property
    def layers(self):
        return len(self.keys)


def save_system_cache(cache: SystemKvCache, path):
    """Write a system cache as a flat little-endian binary file.

    Layout: magic, version, layers, s, h, d, precision-bits header, then
    for each layer the K tensor followed by the V tensor, row-major.
    """
    s, h, d = cache.keys[0].shape
    bits = cache.keys[0].dtype.itemsize * 8
    header = _MAGIC + struct.pack("<IIIIII", _VERSION, cache.layers, s, h, d, bits)
    with open(path, "wb") as f:
        f.write(header)
        for k, v in zip(cache.keys, cache.values):
            f.write(np.ascontiguousarray(k).astype(f"<f{bits // 8}").tobytes())
            f.write(np.ascontiguousarray(v).astype(f"<f{bits // 8}").tobytes())


def load_system_cache(path, prompt_id="system"):
    """Read a system cache written by save_system_cache."""
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ContractError(f"{path}: not a system KV cache file")
        version, layers, s, h, d, bits = struct.unpack("<IIIIII", f.read(24))
        if version != _VERSION:
            raise ContractError(f"{path}: unsupported version {version}")
        dtype = np.dtype(f"<f{bits // 8}")
        count = s * h * d
        keys, values = [], []
        for _ in range(layers):
            k = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype)
            v = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype)
            keys.append(k.astype(np.float64).reshape(s, h, d))
            values.append(v.astype(np.float64).reshape(s, h, d))
    return SystemKvCache(keys=tuple(keys), values=tuple(values),
                         system_len=s, prompt_id=prompt_id)


@dataclass
class KvBlock:
    """One block of one layer's storage: (block_size, h, d) keys/values
    plus the number of token slots currently used."""

    keys: np.ndarray
    values: np.ndarray
    fill: int


class BlockPool:
    """Bookkeeping-only block allocator: tables, lengths, capacity.

    Used directly by the serving simulator (no tensor storage) and as the
    accounting core of PagedKvCache. Blocks are owned by exactly one
    request; allocated + free always equals the pool size.
    """

    def __init__(self, num_blocks, block_size=DEFAULT_BLOCK_SIZE):
        if num_blocks < 1 or block_size < 1:
            raise ContractError("pool needs at least one block of one slot")
        self.num_blocks = num_blocks
        self.block_size = block_size
        self._free = list(range(num_blocks - 1, -1, -1))
        self.tables: dict = {}
        self.lengths: dict = {}

    @property
    def free_blocks(self):
        return len(self._free)

    @property
    def used_blocks(self):
        return self.num_blocks - len(self._free)

    def blocks_for(self, tokens):
        """Blocks needed to hold the given number of token slots."""
        return -(-tokens // self.block_size)

    def register(self, request_id):
        if request_id in self.tables:
            raise ContractError(f"request {request_id!r} already registered")
        self.tables[request_id] = []
        self.lengths[request_id] = 0

    def grow(self, request_id, n_tokens):
        """Advance a request's length by n_tokens, allocating blocks as the
        length crosses block boundaries. Raises CapacityError when the pool
        is exhausted (the scheduler should stop admitting)."""
        if request_id not in self.tables:
            raise ContractError(f"unknown request {request_id!r}")
        table = self.tables[request_id]
        new_len = self.lengths[request_id] + n_tokens
        need = self.blocks_for(new_len)
        if need - len(table) > len(self._free):
            raise CapacityError(
                f"pool exhausted: request {request_id!r} needs "
                f"{need - len(table)} blocks, {len(self._free)} free")
        while len(table) < need:
            table.append(self._free.pop())
        self.lengths[request_id] = new_len
        return new_len

    def release(self, request_id):
        """Return all of a request's blocks to the pool; returns the count."""
        table = self.tables.pop(request_id, [])
        self.lengths.pop(request_id, None)
        for bid in reversed(table):
            self._free.append(bid)
        return len(table)


class PagedKvCache:
    """Block-paged context KV storage for all layers of a model.

    Storage is preallocated as (layers, num_blocks, block_size, h, d)
    arrays for keys and values; requests address it through their block
    tables. gather() copies a request's tokens into contiguous scratch in
    append order.
    """

    def __init__(self, layers, heads, head_dim, num_blocks,
                 block_size=DEFAULT_BLOCK_SIZE, dtype=np.float64):
        self.pool = BlockPool(num_blocks, block_size)
        self.layers = layers
        self.heads = heads
        self.head_dim = head_dim
        self.dtype = np.dtype(dtype)
        shape = (layers, num_blocks, block_size, heads, head_dim)
        self._k = np.zeros(shape, dtype=self.dtype)
        self._v = np.zeros(shape, dtype=self.dtype)
        self._layer_lengths: dict = {}

    @property
    def block_size(self):
        return self.pool.block_size

    def register(self, request_id):
        self.pool.register(request_id)
        self._layer_lengths[request_id] = [0] * self.layers

    def length(self, request_id, layer=0):
        return self._layer_lengths[request_id][layer]

    def append(self, request_id, layer, k, v):
        """Append (m, h, d) keys/values for one layer; returns new length.

        Blocks are allocated when the first layer of a step crosses a block
        boundary; later layers reuse the same table entries.
        """
        k = np.asarray(k)
        v = np.asarray(v)
        if k.shape != v.shape or k.ndim != 3 or k.shape[1:] != (
                self.heads, self.head_dim):
            raise DimensionError(
                f"append expects (m, {self.heads}, {self.head_dim}) pairs, "
                f"got {k.shape} and {v.shape}")
        m = k.shape[0]
        lengths = self._layer_lengths[request_id]
        start = lengths[layer]
        table = self.pool.tables[request_id]
        need = self.pool.blocks_for(start + m)
        if need > len(table):
            self.pool.grow(request_id, (start + m) - self.pool.lengths[request_id])
        bs = self.block_size
        for t in range(m):
            pos = start + t
            bid = table[pos // bs]
            off = pos % bs
            self._k[layer, bid, off] = k[t]
            self._v[layer, bid, off] = v[t]
        lengths[layer] = start + m
        return start + m

    def gather(self, request_id, layer, counter=None):
        """Contiguous copy of a request's cached keys/values, append order.

        When a counter is given, adds 2*c*h*d to it: the physical element
        count of both copied tensors (this storage-level convention differs
        from the attention step counters, which charge an attended position
        once; callers pick one, never both).
        """
        if request_id not in self.pool.tables:
            raise ContractError(f"unknown request {request_id!r}")
        c = self._layer_lengths[request_id][layer]
        table = self.pool.tables[request_id]
        k = np.empty((c, self.heads, self.head_dim), dtype=np.float64)
        v = np.empty((c, self.heads, self.head_dim), dtype=np.float64)
        bs = self.block_size
        done = 0
        for bi, bid in enumerate(table):
            if done >= c:
                break
            take = min(bs, c - done)
            k[done:done + take] = self._k[layer, bid, :take]
            v[done:done + take] = self._v[layer, bid, :take]
            done += take
        if counter is not None:
            counter.add_load(2 * c * self.heads * self.head_dim)
        return k, v

    def block(self, layer, block_id, fill):
        """View one block of one layer as a KvBlock."""
        return KvBlock(keys=self._k[layer, block_id],
                       values=self._v[layer, block_id], fill=fill)

    def release(self, request_id):
        self._layer_lengths.pop(request_id, None)
        return self.pool.release(request_id)
