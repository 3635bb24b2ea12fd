"""Prefill/decode cache store, tiered load-latency model and compression rates.

A CollectiveKV cache entry holds only the low-dimensional user-specific K/V
and the per-item pool indices; the pools themselves stay resident and their
load time is not charged to requests. Entry files (``.cke``) are laid out as::

    b"CKE1"
    u32 id_length, id bytes (utf-8)
    u32 n, u16 d_u, u8 elem_width, u8 idx_width
    K_u  (n*d_u elements)   little-endian, row-major
    V_u  (n*d_u elements)
    I_k  (n indices)
    I_v  (n indices)

Full-KV baseline entries (``.ckb``) use ``b"CKB1"``, the same id header,
``u32 n, u16 d_a, u8 elem_width, u8 0`` and then K and V.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attention import ModelConfig, attend
from .collective import collective_forward, write_bytes_atomic
from .errors import CacheMissError, ShapeError, StorageError, UndefinedMetricError, UsageError
from .numkit import sigmoid

ENTRY_MAGIC = b"CKE1"
BASELINE_MAGIC = b"CKB1"
ELEM_DTYPES = {2: "<f2", 4: "<f4", 8: "<f8"}
INDEX_DTYPES = {1: "<u1", 2: "<u2", 4: "<u4"}

# Reference measurements (SIM host model, A100 GPU): batch size vs load latency in ms.
REFERENCE_BATCH = np.array([1, 8, 32, 64, 128, 256, 512])
REFERENCE_KV_MS = np.array([0.099, 1.030, 1.808, 3.418, 6.679, 15.216, 32.991])
REFERENCE_COLLECTIVE_MS = np.array([0.084, 0.129, 0.136, 0.152, 0.222, 0.375, 0.695])


def _check_widths(elem_width: int, idx_width: int | None = None) -> None:
    if elem_width not in ELEM_DTYPES:
        raise UsageError(f"element width must be one of {sorted(ELEM_DTYPES)}, got {elem_width}")
    if idx_width is not None and idx_width not in INDEX_DTYPES:
        raise UsageError(f"index width must be one of {sorted(INDEX_DTYPES)}, got {idx_width}")


def index_width_fits(pool_size: int, idx_width: int) -> bool:
    return pool_size <= 2 ** (8 * idx_width)


def _read_id(data: bytes) -> tuple[int, str]:
    """Offset of the fixed-size header fields and the user id."""
    if len(data) < 8:
        raise StorageError("cache entry truncated in its header")
    (id_len,) = struct.unpack_from("<I", data, 4)
    off = 8 + id_len
    if len(data) < off + 8:
        raise StorageError("cache entry truncated in its header")
    return off, data[8:off].decode()


@dataclass
class CacheEntry:
    user_id: str
    K_u: np.ndarray
    V_u: np.ndarray
    I_k: np.ndarray
    I_v: np.ndarray
    elem_width: int = 4
    idx_width: int = 2

    @property
    def n(self) -> int:
        return int(self.I_k.size)

    @property
    def user_dim(self) -> int:
        return int(self.K_u.shape[1])

    @property
    def byte_size(self) -> int:
        return self.n * (2 * self.user_dim * self.elem_width + 2 * self.idx_width)

    def header(self) -> bytes:
        uid = self.user_id.encode()
        return ENTRY_MAGIC + struct.pack("<I", len(uid)) + uid + struct.pack(
            "<IHBB", self.n, self.user_dim, self.elem_width, self.idx_width)

    def to_bytes(self) -> bytes:
        e, i = ELEM_DTYPES[self.elem_width], INDEX_DTYPES[self.idx_width]
        return b"".join([
            self.header(),
            np.ascontiguousarray(self.K_u, dtype=e).tobytes(),
            np.ascontiguousarray(self.V_u, dtype=e).tobytes(),
            np.ascontiguousarray(self.I_k, dtype=i).tobytes(),
            np.ascontiguousarray(self.I_v, dtype=i).tobytes(),
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "CacheEntry":
        if data[:4] != ENTRY_MAGIC:
            raise StorageError("not a CKE1 cache entry")
        off, uid = _read_id(data)
        n, du, ew, iw = struct.unpack_from("<IHBB", data, off)
        off += 8
        _check_widths(ew, iw)
        if len(data) != off + n * (2 * du * ew + 2 * iw):
            raise StorageError(f"cache entry for {uid}: {len(data)} bytes does not match its header")
        blocks = []
        for count, dtype, width in ((n * du, ELEM_DTYPES[ew], ew), (n * du, ELEM_DTYPES[ew], ew),
                                    (n, INDEX_DTYPES[iw], iw), (n, INDEX_DTYPES[iw], iw)):
            blocks.append(np.frombuffer(data, dtype=dtype, count=count, offset=off))
            off += count * width
        return cls(uid, blocks[0].reshape(n, du).astype(np.float64), blocks[1].reshape(n, du).astype(np.float64),
                   blocks[2].astype(np.int64), blocks[3].astype(np.int64), ew, iw)


@dataclass
class BaselineEntry:
    user_id: str
    K: np.ndarray
    V: np.ndarray
    elem_width: int = 4

    @property
    def n(self) -> int:
        return int(self.K.shape[0])

    @property
    def byte_size(self) -> int:
        return 2 * self.n * int(self.K.shape[1]) * self.elem_width

    def to_bytes(self) -> bytes:
        uid = self.user_id.encode()
        e = ELEM_DTYPES[self.elem_width]
        return b"".join([BASELINE_MAGIC, struct.pack("<I", len(uid)), uid,
                         struct.pack("<IHBB", self.n, self.K.shape[1], self.elem_width, 0),
                         np.ascontiguousarray(self.K, dtype=e).tobytes(),
                         np.ascontiguousarray(self.V, dtype=e).tobytes()])

    @classmethod
    def from_bytes(cls, data: bytes) -> "BaselineEntry":
        if data[:4] != BASELINE_MAGIC:
            raise StorageError("not a CKB1 baseline entry")
        off, uid = _read_id(data)
        n, da, ew, _ = struct.unpack_from("<IHBB", data, off)
        off += 8
        _check_widths(ew)
        if len(data) != off + 2 * n * da * ew:
            raise StorageError(f"baseline entry for {uid}: {len(data)} bytes does not match its header")
        k = np.frombuffer(data, dtype=ELEM_DTYPES[ew], count=n * da, offset=off)
        v = np.frombuffer(data, dtype=ELEM_DTYPES[ew], count=n * da, offset=off + n * da * ew)
        return cls(uid, k.reshape(n, da).astype(np.float64), v.reshape(n, da).astype(np.float64), ew)


def read_entry(data: bytes):
    if data[:4] == ENTRY_MAGIC:
        return CacheEntry.from_bytes(data)
    if data[:4] == BASELINE_MAGIC:
        return BaselineEntry.from_bytes(data)
    raise StorageError("unknown cache entry magic")


class CacheStore:
    """One file per user under ``root`` plus an ``index.tsv`` manifest.

    Writes go to a temporary file that is renamed into place, so readers
    never see a partial entry.
    """

    INDEX = "index.tsv"

    def __init__(self, root: Path):
        self.root = Path(root)
        self._index: dict[str, tuple[str, int]] = {}
        index = self.root / self.INDEX
        if index.exists():
            for line in index.read_text().splitlines():
                uid, fname, size = line.split("\t")
                self._index[uid] = (fname, int(size))

    def __contains__(self, user_id: str) -> bool:
        return user_id in self._index

    def __len__(self) -> int:
        return len(self._index)

    def user_ids(self) -> list[str]:
        return sorted(self._index)

    def path(self, user_id: str) -> Path:
        return self.root / self._index[user_id][0]

    @staticmethod
    def _file_name(user_id: str, entry) -> str:
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in user_id)
        return safe + (".cke" if isinstance(entry, CacheEntry) else ".ckb")

    def put(self, entry) -> Path:
        fname = self._file_name(entry.user_id, entry)
        path = self.root / fname
        write_bytes_atomic(path, entry.to_bytes())
        self._index[entry.user_id] = (fname, entry.byte_size)
        write_bytes_atomic(self.root / self.INDEX, "".join(
            f"{uid}\t{f}\t{s}\n" for uid, (f, s) in sorted(self._index.items())).encode())
        return path

    def read_bytes(self, user_id: str) -> bytes:
        if user_id not in self._index:
            raise CacheMissError(f"no cache entry for user {user_id!r}; run prefill for this user first")
        try:
            return self.path(user_id).read_bytes()
        except OSError as exc:
            raise StorageError(f"cannot read {self.path(user_id)}: {exc}") from exc

    def get(self, user_id: str):
        return read_entry(self.read_bytes(user_id))


# ---------------------------------------------------------------------------
# Prefill / decode

def _require_uniform_sharing(config: ModelConfig) -> bool:
    c = config.collective
    if c.share_keys != c.share_values:
        raise UsageError("the cache stores fully shared (CollectiveKV) or fully unshared (baseline) models only")
    return c.share_keys


def prefill(user_id: str, S: np.ndarray, params: dict, config: ModelConfig, store: Optional[CacheStore] = None,
            elem_width: int = 4, idx_width: int = 2):
    """Project a history into its cache entry (inference mode) and persist it."""
    _check_widths(elem_width, idx_width)
    shared = _require_uniform_sharing(config)
    S = np.asarray(S, dtype=np.float64).reshape(-1, config.collective.embed_dim)
    fwd = collective_forward(S, config.collective, params, "inference")
    if shared:
        if not index_width_fits(config.collective.pool_size, idx_width):
            raise UsageError(f"pool of {config.collective.pool_size} does not fit {idx_width}-byte indices")
        du = config.collective.user_dim
        entry = CacheEntry(user_id, fwd.K[:, :du], fwd.V[:, :du], fwd.sides["k"].rmap.indices,
                           fwd.sides["v"].rmap.indices, elem_width, idx_width)
    else:
        entry = BaselineEntry(user_id, fwd.K, fwd.V, elem_width)
    if store is not None:
        store.put(entry)
        # what was written is what decode will read back
        entry = store.get(user_id)
    return entry


@dataclass(frozen=True)
class TierModel:
    setup_ms: float
    bandwidth: float  # bytes per millisecond

    def __post_init__(self):
        if self.setup_ms < 0 or not self.bandwidth > 0:
            raise UsageError(f"invalid tier: setup {self.setup_ms} ms, bandwidth {self.bandwidth} B/ms")


def simulated_load_latency(n_bytes: float, tier: TierModel) -> float:
    if n_bytes < 0:
        raise UsageError("byte count must be >= 0")
    return tier.setup_ms + n_bytes / tier.bandwidth


def fit_affine_tier(n_bytes: Sequence[float], latency_ms: Sequence[float]) -> TierModel:
    """Ordinary least squares of latency on bytes."""
    x = np.asarray(n_bytes, dtype=np.float64)
    A = np.column_stack([np.ones_like(x), x])
    (setup, slope), *_ = np.linalg.lstsq(A, np.asarray(latency_ms, dtype=np.float64), rcond=None)
    return TierModel(max(float(setup), 0.0), 1.0 / float(slope))


def fit_reference_tier(entry_bytes: float) -> TierModel:
    """Tier whose load time for ``b`` baseline entries of ``entry_bytes`` each
    tracks the reference full-KV latency column.

    Least squares on relative residuals: the column spans three orders of
    magnitude, and the unweighted fit has a negative intercept.
    """
    b = REFERENCE_BATCH.astype(np.float64)
    y = REFERENCE_KV_MS
    A = np.column_stack([np.ones_like(b), b]) / y[:, None]
    (setup, per_entry), *_ = np.linalg.lstsq(A, np.ones_like(y), rcond=None)
    return TierModel(float(setup), entry_bytes / float(per_entry))


def compression_rate(entry: CacheEntry, baseline: BaselineEntry) -> float:
    if entry.user_id != baseline.user_id or entry.n != baseline.n:
        raise UsageError("compression rate needs entries for the same user and sequence length")
    if baseline.byte_size == 0:
        raise UndefinedMetricError("baseline entry is empty")
    return entry.byte_size / baseline.byte_size


def bytes_per_item(config, elem_width: int = 4, idx_width: int = 2) -> int:
    """Cached bytes per history item; unshared sides store the full width."""
    c = config.collective if isinstance(config, ModelConfig) else config
    total = 0
    for side in ("k", "v"):
        total += c.user_dim * elem_width + idx_width if c.shared(side) else c.attn_dim * elem_width
    return total


def compression_rate_for(config, elem_width: int = 4, idx_width: int = 2) -> float:
    c = config.collective if isinstance(config, ModelConfig) else config
    return bytes_per_item(c, elem_width, idx_width) / (2 * c.attn_dim * elem_width)


@dataclass
class DecodeResult:
    attn_out: np.ndarray
    probs: np.ndarray
    simulated_ms: float
    wallclock_ms: float
    entry_bytes: int


def assemble_from_entry(entry, params: dict, config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild full K/V from a cache entry using the resident pools."""
    if isinstance(entry, BaselineEntry):
        return entry.K, entry.V
    K = np.concatenate([entry.K_u, params["pool_k"][entry.I_k]], axis=1)
    V = np.concatenate([entry.V_u, params["pool_v"][entry.I_v]], axis=1)
    return K, V


def decode(user_id: str, targets: np.ndarray, params: dict, config: ModelConfig, store: CacheStore,
           tier: TierModel) -> DecodeResult:
    """Score candidates for a cached user without touching the history."""
    t0 = time.perf_counter()
    raw = store.read_bytes(user_id)
    entry = read_entry(raw)
    wall = (time.perf_counter() - t0) * 1e3
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if targets.shape[1] != config.collective.embed_dim:
        raise ShapeError(f"targets must have {config.collective.embed_dim} columns, got {targets.shape}")
    K, V = assemble_from_entry(entry, params, config)
    query = targets @ params["query.W"]
    if config.attention.mode == "self":
        own = collective_forward(targets, config.collective, params, "inference")
        _, out = attend(query, K, V, own.K, own.V)
    else:
        _, out = attend(query, K, V)
    logits = (out * query) @ params["head.w"] + params["head.b"][0]
    return DecodeResult(out, sigmoid(logits), simulated_load_latency(entry.byte_size, tier), wall,
                        entry.byte_size)


# ---------------------------------------------------------------------------
# Batch latency benchmark

@dataclass
class BenchRow:
    batch_size: int
    baseline_ms: float
    collective_load_ms: float
    collective_gather_ms: float
    gather_std_ms: float

    @property
    def collective_ms(self) -> float:
        return self.collective_load_ms + self.collective_gather_ms

    @property
    def ratio(self) -> float:
        return self.baseline_ms / self.collective_ms

    CSV_COLUMNS = ("batch_size", "baseline_ms", "collective_load_ms", "collective_gather_ms", "ratio",
                   "gather_std_ms")

    def row(self) -> list:
        return [self.batch_size, f"{self.baseline_ms:.6f}", f"{self.collective_load_ms:.6f}",
                f"{self.collective_gather_ms:.6f}", f"{self.ratio:.4f}", f"{self.gather_std_ms:.6f}"]


def bench_latency(entries: Sequence[CacheEntry], params: dict, config: ModelConfig, batch_sizes: Sequence[int],
                  baseline_tier: TierModel, collective_tier: Optional[TierModel] = None,
                  repeats: int = 20) -> list[BenchRow]:
    """Per batch size: simulated full-KV load, simulated compact load and the
    measured wall-clock of gathering the batch's collective K/V from the pools.

    Batches cycle through ``entries`` when a batch is larger than the cache.
    The pools are held at the entries' element width, as they would be when
    resident next to the attention kernel.
    """
    if not entries:
        raise UsageError("bench needs at least one prefilled entry")
    if repeats < 1:
        raise UsageError("repeats must be >= 1")
    collective_tier = collective_tier or baseline_tier
    ew = entries[0].elem_width
    dtype = ELEM_DTYPES[ew]
    pool_k = np.ascontiguousarray(params["pool_k"], dtype=dtype)
    pool_v = np.ascontiguousarray(params["pool_v"], dtype=dtype)
    da = config.attn_dim
    rows = []
    for b in batch_sizes:
        batch = [entries[i % len(entries)] for i in range(b)]
        full_bytes = sum(2 * e.n * da * ew for e in batch)
        compact_bytes = sum(e.byte_size for e in batch)
        ik = np.concatenate([e.I_k for e in batch])
        iv = np.concatenate([e.I_v for e in batch])
        pool_k[ik], pool_v[iv]  # warm-up
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            pool_k[ik]
            pool_v[iv]
            samples.append((time.perf_counter() - t0) * 1e3)
        rows.append(BenchRow(b, simulated_load_latency(full_bytes, baseline_tier),
                             simulated_load_latency(compact_bytes, collective_tier),
                             float(np.mean(samples)), float(np.std(samples))))
    return rows
