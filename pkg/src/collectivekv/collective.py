"""Cross-user KV sharing: user-specific projection, routed global pool, losses.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by the names in
:func:`param_shapes`; the small dataclasses below are read-only views used by
the individual operations.

Keys and values are handled by two symmetric "sides". A shared side builds

    K = concat(S @ W_k + b_k,  gate * pool_k[argmax(S @ W_r + b_r)])

where ``gate`` is ``sigmoid`` of the selected router logit in training mode
and exactly 1 in inference mode. An unshared side is one dense projection to
the full attention width.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np

from .errors import ShapeError, StorageError, UsageError
from .numkit import Rng, log_sigmoid, sigmoid, softmax_rows

Mode = Literal["training", "inference"]
SIDES = ("k", "v")


@dataclass(frozen=True)
class CollectiveConfig:
    embed_dim: int
    user_dim: int
    global_dim: int
    pool_size: int = 64
    peak_weight: float = 0.01
    balance_weight: float = 1.0
    share_keys: bool = True
    share_values: bool = True
    tie_routers: bool = False

    @property
    def attn_dim(self) -> int:
        return self.user_dim + self.global_dim

    def shared(self, side: str) -> bool:
        return self.share_keys if side == "k" else self.share_values

    @property
    def active_sides(self) -> tuple[str, ...]:
        return tuple(s for s in SIDES if self.shared(s))

    def router_name(self, side: str) -> str:
        return "router_k" if (self.tie_routers or side == "k") else "router_v"

    def validate(self) -> None:
        problems = []
        if self.embed_dim < 1:
            problems.append("embed_dim must be >= 1")
        if self.user_dim < 0 or self.global_dim < 0:
            problems.append("user_dim and global_dim must be >= 0")
        if self.attn_dim < 1:
            problems.append("attn_dim = user_dim + global_dim must be >= 1")
        if self.pool_size < 1:
            problems.append("pool_size must be >= 1")
        if self.peak_weight < 0 or self.balance_weight < 0:
            problems.append("loss weights must be >= 0")
        if problems:
            raise UsageError("; ".join(problems))


@dataclass(frozen=True)
class UserProjection:
    W_k: np.ndarray
    b_k: np.ndarray
    W_v: np.ndarray
    b_v: np.ndarray


@dataclass(frozen=True)
class RouterHead:
    W: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class GlobalPool:
    key_pool: np.ndarray
    value_pool: np.ndarray


@dataclass(frozen=True)
class RoutingMap:
    logits: np.ndarray
    indices: np.ndarray

    @property
    def selected_logits(self) -> np.ndarray:
        return self.logits[np.arange(self.indices.size), self.indices]


# ---------------------------------------------------------------------------
# Parameters

def param_shapes(config: CollectiveConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in checkpoint order."""
    de, du, dg, da, m = config.embed_dim, config.user_dim, config.global_dim, config.attn_dim, config.pool_size
    shapes: dict[str, tuple[int, ...]] = {}
    for side in SIDES:
        if config.shared(side):
            shapes[f"proj_{side}.W"] = (de, du)
            shapes[f"proj_{side}.b"] = (du,)
        else:
            shapes[f"full_{side}.W"] = (de, da)
            shapes[f"full_{side}.b"] = (da,)
    routers = sorted({config.router_name(s) for s in config.active_sides})
    for name in routers:
        shapes[f"{name}.W"] = (de, m)
        shapes[f"{name}.b"] = (m,)
    for side in config.active_sides:
        shapes[f"pool_{side}"] = (m, dg)
    return shapes


def init_collective_params(config: CollectiveConfig, rng: Rng) -> dict[str, np.ndarray]:
    """Fan-in uniform init for every dense layer; pools uniform in ±1/sqrt(d_g)."""
    config.validate()
    params = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("pool_"):
            bound = 1.0 / np.sqrt(max(config.global_dim, 1))
        else:
            bound = 1.0 / np.sqrt(config.embed_dim)
        params[name] = rng.uniform(-bound, bound, shape)
    return params


def user_projection(params: dict) -> UserProjection:
    return UserProjection(params["proj_k.W"], params["proj_k.b"], params["proj_v.W"], params["proj_v.b"])


def router_head(params: dict, config: CollectiveConfig, side: str) -> RouterHead:
    name = config.router_name(side)
    return RouterHead(params[f"{name}.W"], params[f"{name}.b"])


# ---------------------------------------------------------------------------
# Operations

def _dense(S: np.ndarray, W: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    if S.ndim != 2 or W.ndim != 2 or S.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"{what}: input {S.shape}, weight {W.shape}, bias {b.shape}")
    return S @ W + b


def project_user_specific(S: np.ndarray, proj: UserProjection) -> tuple[np.ndarray, np.ndarray]:
    return _dense(S, proj.W_k, proj.b_k, "key projection"), _dense(S, proj.W_v, proj.b_v, "value projection")


def route(S: np.ndarray, head: RouterHead) -> RoutingMap:
    logits = _dense(S, head.W, head.b, "router")
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return RoutingMap(logits=logits, indices=np.argmax(logits, axis=1).astype(np.int64))


def gather_collective(pool: np.ndarray, rmap: RoutingMap, mode: Mode) -> np.ndarray:
    idx = rmap.indices
    if idx.size and (idx.min() < 0 or idx.max() >= pool.shape[0]):
        raise AssertionError("routing index outside the pool")
    rows = pool[idx]
    if mode == "inference":
        return rows
    if mode != "training":
        raise UsageError(f"unknown mode {mode!r}")
    return sigmoid(rmap.selected_logits)[:, None] * rows


def assemble_kv(user: np.ndarray, collective: np.ndarray) -> np.ndarray:
    if user.shape[0] != collective.shape[0]:
        raise ShapeError(f"row mismatch: user {user.shape} vs collective {collective.shape}")
    return np.concatenate([user, collective], axis=1)


def peak_loss(rmap: RoutingMap) -> float:
    if rmap.indices.size == 0:
        raise UsageError("peak_loss needs at least one routed item")
    return float(-np.mean(log_sigmoid(rmap.selected_logits)))


def balance_loss(rmap: RoutingMap) -> float:
    """KL divergence between the mean routing distribution and uniform."""
    n, m = rmap.logits.shape
    if n == 0:
        raise UsageError("balance_loss needs at least one routed item")
    pbar = softmax_rows(rmap.logits).mean(axis=0)
    terms = np.where(pbar > 0, pbar * np.log(np.where(pbar > 0, pbar * m, 1.0)), 0.0)
    return float(max(terms.sum(), 0.0))


# ---------------------------------------------------------------------------
# Forward / backward over both sides

@dataclass
class SideState:
    side: str
    shared: bool
    output: np.ndarray
    user: Optional[np.ndarray] = None
    rmap: Optional[RoutingMap] = None
    gate: Optional[np.ndarray] = None
    rows: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    peak: float = 0.0
    balance: float = 0.0


@dataclass
class CollectiveForward:
    S: np.ndarray
    config: CollectiveConfig
    mode: Mode
    K: np.ndarray
    V: np.ndarray
    aux: float
    peak: float
    balance: float
    sides: dict[str, SideState] = field(default_factory=dict)

    @property
    def indices(self) -> dict[str, np.ndarray]:
        return {s: st.rmap.indices for s, st in self.sides.items() if st.shared}

    def mean_gate(self) -> float:
        gates = [sigmoid(st.rmap.selected_logits) for st in self.sides.values() if st.shared]
        return float(np.mean(np.concatenate(gates))) if gates and gates[0].size else 1.0


def _side_forward(S, config: CollectiveConfig, params: dict, side: str, mode: Mode) -> SideState:
    if not config.shared(side):
        out = _dense(S, params[f"full_{side}.W"], params[f"full_{side}.b"], f"full {side} projection")
        return SideState(side=side, shared=False, output=out)
    user = _dense(S, params[f"proj_{side}.W"], params[f"proj_{side}.b"], f"{side} projection")
    rmap = route(S, router_head(params, config, side))
    pool = params[f"pool_{side}"]
    rows = pool[rmap.indices]
    gate = sigmoid(rmap.selected_logits) if mode == "training" else np.ones(rmap.indices.size)
    collective = gather_collective(pool, rmap, mode)
    state = SideState(side=side, shared=True, output=assemble_kv(user, collective), user=user,
                      rmap=rmap, gate=gate, rows=rows)
    if S.shape[0]:
        state.probs = softmax_rows(rmap.logits)
        state.peak = peak_loss(rmap)
        state.balance = balance_loss(rmap)
    return state


def collective_forward(S: np.ndarray, config: CollectiveConfig, params: dict, mode: Mode) -> CollectiveForward:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] != config.embed_dim:
        raise ShapeError(f"sequence must be n x {config.embed_dim}, got {S.shape}")
    if mode not in ("training", "inference"):
        raise UsageError(f"unknown mode {mode!r}")
    sides = {side: _side_forward(S, config, params, side, mode) for side in SIDES}
    active = config.active_sides
    peak = float(np.mean([sides[s].peak for s in active])) if active else 0.0
    bal = float(np.mean([sides[s].balance for s in active])) if active else 0.0
    aux = config.peak_weight * peak + config.balance_weight * bal
    return CollectiveForward(S=S, config=config, mode=mode, K=sides["k"].output, V=sides["v"].output,
                             aux=aux, peak=peak, balance=bal, sides=sides)


def _accumulate(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def collective_backward(fwd: CollectiveForward, dK: np.ndarray, dV: np.ndarray, params: dict,
                        aux_scale: float = 1.0) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of ``<dK, K> + <dV, V> + aux_scale * aux`` w.r.t. S and params.

    The argmax is a constant; router weights learn through the sigmoid gate,
    the peak loss on the selected logits and the balance loss on full rows.
    """
    if fwd.mode != "training":
        raise UsageError("collective_backward requires a training-mode forward pass")
    config = fwd.config
    S = fwd.S
    n = S.shape[0]
    du = config.user_dim
    active = config.active_sides
    peak_coef = aux_scale * config.peak_weight / len(active) if active else 0.0
    bal_coef = aux_scale * config.balance_weight / len(active) if active else 0.0
    dS = np.zeros_like(S)
    grads: dict[str, np.ndarray] = {}
    for side, dout in (("k", dK), ("v", dV)):
        st = fwd.sides[side]
        if dout.shape != st.output.shape:
            raise ShapeError(f"upstream grad for {side} has shape {dout.shape}, expected {st.output.shape}")
        if not st.shared:
            W = params[f"full_{side}.W"]
            _accumulate(grads, f"full_{side}.W", S.T @ dout)
            _accumulate(grads, f"full_{side}.b", dout.sum(axis=0))
            dS += dout @ W.T
            continue
        d_user, d_coll = dout[:, :du], dout[:, du:]
        W_u = params[f"proj_{side}.W"]
        _accumulate(grads, f"proj_{side}.W", S.T @ d_user)
        _accumulate(grads, f"proj_{side}.b", d_user.sum(axis=0))
        dS += d_user @ W_u.T

        idx = st.rmap.indices
        gate = st.gate
        d_pool = np.zeros_like(params[f"pool_{side}"])
        np.add.at(d_pool, idx, gate[:, None] * d_coll)
        _accumulate(grads, f"pool_{side}", d_pool)

        dM = np.zeros_like(st.rmap.logits)
        if n:
            d_gate = np.sum(d_coll * st.rows, axis=1)
            d_sel = d_gate * gate * (1.0 - gate)
            d_sel += peak_coef * (sigmoid(st.rmap.selected_logits) - 1.0) / n
            dM[np.arange(n), idx] += d_sel
            m = config.pool_size
            pbar = st.probs.mean(axis=0)
            d_pbar = np.log(np.maximum(pbar, 1e-300) * m) + 1.0
            dA = np.broadcast_to(bal_coef * d_pbar / n, st.probs.shape)
            dM += st.probs * (dA - np.sum(st.probs * dA, axis=1, keepdims=True))
        name = config.router_name(side)
        W_r = params[f"{name}.W"]
        _accumulate(grads, f"{name}.W", S.T @ dM)
        _accumulate(grads, f"{name}.b", dM.sum(axis=0))
        dS += dM @ W_r.T
    for name, shape in param_shapes(config).items():
        grads.setdefault(name, np.zeros(shape))
    return dS, grads


# ---------------------------------------------------------------------------
# Checkpoint format
#
#   b"CKV1"
#   u32 embed_dim, u32 user_dim, u32 global_dim, u32 pool_size, u32 flags
#   then, for each tensor in param_shapes() order:
#       u64 element count, element_count * f64 (row-major)
#
# flags: bit0 share_keys, bit1 share_values, bit2 tie_routers; higher bits
# are owned by the caller (the CTR model stores its attention mode there).
# Extra tensors (the attention head) follow the collective ones in the order
# given by ``extra_names``.

CHECKPOINT_MAGIC = b"CKV1"
FLAG_SHARE_KEYS = 1
FLAG_SHARE_VALUES = 2
FLAG_TIE_ROUTERS = 4


def config_flags(config: CollectiveConfig) -> int:
    return (FLAG_SHARE_KEYS * config.share_keys) | (FLAG_SHARE_VALUES * config.share_values) \
        | (FLAG_TIE_ROUTERS * config.tie_routers)


def encode_checkpoint(config: CollectiveConfig, params: dict, extra_names=(), extra_flags: int = 0) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<5I", config.embed_dim, config.user_dim, config.global_dim, config.pool_size,
                          config_flags(config) | extra_flags))
    for name in list(param_shapes(config)) + list(extra_names):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        buf.write(struct.pack("<Q", arr.size))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def decode_checkpoint(data: bytes, extra_shapes=None, **config_overrides):
    """Inverse of :func:`encode_checkpoint`.

    ``extra_shapes`` is a callable ``(config, flags) -> {name: shape}`` for
    tensors appended after the collective parameters.
    Returns ``(config, params, flags)``.
    """
    if data[:4] != CHECKPOINT_MAGIC:
        raise StorageError("not a CKV1 checkpoint")
    de, du, dg, m, flags = struct.unpack_from("<5I", data, 4)
    config = CollectiveConfig(embed_dim=de, user_dim=du, global_dim=dg, pool_size=m,
                              share_keys=bool(flags & FLAG_SHARE_KEYS),
                              share_values=bool(flags & FLAG_SHARE_VALUES),
                              tie_routers=bool(flags & FLAG_TIE_ROUTERS), **config_overrides)
    shapes = dict(param_shapes(config))
    if extra_shapes is not None:
        shapes.update(extra_shapes(config, flags))
    offset = 24
    params = {}
    for name, shape in shapes.items():
        if offset + 8 > len(data):
            raise StorageError(f"checkpoint truncated before {name}")
        (count,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        expected = int(np.prod(shape, dtype=np.int64))
        if count != expected:
            raise StorageError(f"{name}: stored {count} elements, expected {expected}")
        if offset + 8 * count > len(data):
            raise StorageError(f"checkpoint truncated inside {name}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        params[name] = arr.astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(data):
        raise StorageError(f"{len(data) - offset} trailing bytes in checkpoint")
    return config, params, flags


def write_bytes_atomic(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(data)
        tmp.replace(path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
