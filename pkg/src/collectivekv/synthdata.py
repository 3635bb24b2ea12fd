"""Deterministic synthetic sequential-recommendation data with planted structure.

Items live (up to a small isotropic residual) in a rank-``r`` subspace of the
embedding space. Users belong to groups whose preference vectors share a
common direction; each user's preference is the group vector plus noise.
Histories are sampled without replacement, tilted toward the preference, and
each candidate's click label is Bernoulli(sigmoid(affinity / temperature)).
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import SequenceBatch
from .errors import StorageError, UsageError
from .numkit import Rng


@dataclass(frozen=True)
class SynthConfig:
    num_users: int = 500
    num_items: int = 2000
    num_groups: int = 8
    embed_dim: int = 32
    latent_rank: int = 10
    min_len: int = 40
    max_len: int = 120
    noise_scale: float = 0.3
    label_temperature: float = 0.25
    seed: int = 0
    item_noise: float = 0.01
    shared_scale: float = 1.0
    selection_temperature: float = 0.5
    targets_per_user: int = 8
    length_coupling: float = 0.0

    def validate(self) -> None:
        problems = []
        if self.num_users < 1:
            problems.append("num_users must be >= 1")
        if self.num_groups < 1:
            problems.append("num_groups must be >= 1")
        if self.latent_rank < 1 or self.latent_rank > self.embed_dim:
            problems.append("latent_rank must be in [1, embed_dim]")
        if self.min_len < 0 or self.min_len > self.max_len:
            problems.append("need 0 <= min_len <= max_len")
        if self.max_len > self.num_items:
            problems.append("max_len cannot exceed num_items (histories have no repeats)")
        if self.noise_scale < 0 or self.item_noise < 0:
            problems.append("noise scales must be >= 0")
        if self.label_temperature < 0 or self.selection_temperature <= 0:
            problems.append("label_temperature must be >= 0 and selection_temperature > 0")
        if self.targets_per_user < 1:
            problems.append("targets_per_user must be >= 1")
        if problems:
            raise UsageError("invalid synthetic config: " + "; ".join(problems))

    def manifest(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_manifest(cls, text: str) -> "SynthConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key in types:
                values[key] = float(raw) if types[key] in ("float", float) else int(raw)
        return cls(**values)


@dataclass
class UserRecord:
    user_id: str
    group: int
    history: np.ndarray       # item ids
    target_items: np.ndarray
    labels: np.ndarray
    latent: np.ndarray
    affinity: np.ndarray      # planted score per target (Bayes-optimal ranking)


@dataclass
class SynthDataset:
    config: SynthConfig
    item_embeddings: np.ndarray
    users: list[UserRecord]

    def user(self, user_id: str) -> UserRecord:
        for u in self.users:
            if u.user_id == user_id:
                return u
        raise KeyError(user_id)

    def subset(self, user_ids: Sequence[str]) -> "SynthDataset":
        keep = set(user_ids)
        return SynthDataset(self.config, self.item_embeddings, [u for u in self.users if u.user_id in keep])

    def batch(self, record: UserRecord) -> SequenceBatch:
        return SequenceBatch(
            user_id=record.user_id,
            history=self.item_embeddings[record.history],
            targets=self.item_embeddings[record.target_items],
            labels=record.labels.astype(np.float64),
            target_items=record.target_items,
        )

    def batches(self) -> list[SequenceBatch]:
        return [self.batch(u) for u in self.users]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.config.manifest().encode())
        for u in self.users:
            h.update(u.user_id.encode())
            h.update(u.history.astype("<i8").tobytes())
            h.update(u.target_items.astype("<i8").tobytes())
            h.update(u.labels.astype("<i8").tobytes())
        return h.hexdigest()


def _orthonormal_basis(rng: Rng, d: int, r: int) -> np.ndarray:
    q, rr = np.linalg.qr(rng.normal((d, r)))
    return q * np.sign(np.diag(rr))


def generate(config: SynthConfig) -> SynthDataset:
    config.validate()
    root = Rng(config.seed)
    r, d = config.latent_rank, config.embed_dim

    item_rng = root.spawn("items")
    basis = _orthonormal_basis(item_rng, d, r)
    item_latent = item_rng.normal((config.num_items, r))
    embeddings = item_latent @ basis.T / np.sqrt(r)
    embeddings = embeddings + item_rng.normal((config.num_items, d), config.item_noise / np.sqrt(d))

    group_rng = root.spawn("groups")
    shared = group_rng.normal((r,))
    shared /= np.linalg.norm(shared)
    groups = config.shared_scale * shared + group_rng.normal((config.num_groups, r), 1 / np.sqrt(r))

    user_rng = root.spawn("users")
    users = []
    for i in range(config.num_users):
        g = int(user_rng.integers(0, config.num_groups))
        latent = groups[g] + user_rng.normal((r,), config.noise_scale / np.sqrt(r))
        length = int(user_rng.integers(config.min_len, config.max_len + 1))
        pref = item_latent @ latent / config.selection_temperature
        # Gumbel top-k: a sample without replacement from softmax(pref)
        keys = pref + user_rng.gumbel(config.num_items)
        history = np.argsort(-keys, kind="stable")[:length]
        history = history[user_rng.permutation(length)] if length else history

        t = config.targets_per_user
        from_pref = user_rng.random(t) < 0.5
        uniform_pick = user_rng.integers(0, config.num_items, t)
        probs = np.exp(pref - pref.max())
        probs /= probs.sum()
        pref_pick = user_rng.choice(config.num_items, t, replace=True, p=probs)
        targets = np.where(from_pref, pref_pick, uniform_pick)
        affinity = item_latent[targets] @ latent / np.sqrt(r)
        temp = config.label_temperature
        if config.length_coupling and length:
            temp = temp * (config.max_len / length) ** config.length_coupling
        draws = user_rng.random(t)
        if temp == 0:
            labels = (affinity > 0).astype(np.int64)
        else:
            labels = (draws < 1.0 / (1.0 + np.exp(-affinity / temp))).astype(np.int64)
        users.append(UserRecord(user_id=f"u{i:05d}", group=g, history=history.astype(np.int64),
                                target_items=targets.astype(np.int64), labels=labels, latent=latent,
                                affinity=affinity))
    return SynthDataset(config=config, item_embeddings=embeddings, users=users)


def split(dataset: SynthDataset, train_fraction: float, seed: int | None = None):
    """User-disjoint, seed-deterministic (train, eval) split."""
    if not 0 < train_fraction < 1:
        raise UsageError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(dataset.users)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise UsageError(f"train_fraction {train_fraction} leaves an empty side for {n} users")
    seed = dataset.config.seed if seed is None else seed
    order = Rng(seed).spawn("split").permutation(n)
    train_idx, eval_idx = np.sort(order[:n_train]), np.sort(order[n_train:])
    return (SynthDataset(dataset.config, dataset.item_embeddings, [dataset.users[i] for i in train_idx]),
            SynthDataset(dataset.config, dataset.item_embeddings, [dataset.users[i] for i in eval_idx]))


# ---------------------------------------------------------------------------
# Persistence: text manifest + little-endian length-prefixed blocks
# (u64 element count, then the elements; f64 for reals, i64 for integers).

BLOCK_ORDER = ("item_embeddings", "lengths", "histories", "groups", "targets", "labels", "latents", "affinity")


def _write_block(buf, arr: np.ndarray, dtype: str) -> None:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    buf.write(struct.pack("<Q", arr.size))
    buf.write(arr.tobytes())


def save(dataset: SynthDataset, directory: Path) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "manifest.txt").write_text(dataset.config.manifest())
        buf = io.BytesIO()
        users = dataset.users
        _write_block(buf, dataset.item_embeddings, "<f8")
        _write_block(buf, np.array([u.history.size for u in users]), "<i8")
        _write_block(buf, np.concatenate([u.history for u in users]) if users else np.zeros(0), "<i8")
        _write_block(buf, np.array([u.group for u in users]), "<i8")
        _write_block(buf, np.stack([u.target_items for u in users]), "<i8")
        _write_block(buf, np.stack([u.labels for u in users]), "<i8")
        _write_block(buf, np.stack([u.latent for u in users]), "<f8")
        _write_block(buf, np.stack([u.affinity for u in users]), "<f8")
        (directory / "dataset.bin").write_bytes(buf.getvalue())
    except OSError as exc:
        raise StorageError(f"cannot write dataset to {directory}: {exc}") from exc


def load(directory: Path) -> SynthDataset:
    directory = Path(directory)
    try:
        config = SynthConfig.from_manifest((directory / "manifest.txt").read_text())
        data = (directory / "dataset.bin").read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read dataset from {directory}: {exc}") from exc
    blocks = {}
    offset = 0
    for name in BLOCK_ORDER:
        (count,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        dtype = "<f8" if name in ("item_embeddings", "latents", "affinity") else "<i8"
        blocks[name] = np.frombuffer(data, dtype=dtype, count=count, offset=offset).copy()
        offset += 8 * count
    n_users, t, r = config.num_users, config.targets_per_user, config.latent_rank
    embeddings = blocks["item_embeddings"].reshape(config.num_items, config.embed_dim)
    starts = np.concatenate([[0], np.cumsum(blocks["lengths"])])
    users = []
    for i in range(n_users):
        users.append(UserRecord(
            user_id=f"u{i:05d}", group=int(blocks["groups"][i]),
            history=blocks["histories"][starts[i]:starts[i + 1]],
            target_items=blocks["targets"].reshape(n_users, t)[i],
            labels=blocks["labels"].reshape(n_users, t)[i],
            latent=blocks["latents"].reshape(n_users, r)[i],
            affinity=blocks["affinity"].reshape(n_users, t)[i]))
    return SynthDataset(config, embeddings, users)
