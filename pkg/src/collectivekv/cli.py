"""Command-line entry point: ``collectivekv <subcommand> [--flag value ...]``.

Every subcommand reads one flat run configuration assembled from built-in
defaults, an optional ``key = value`` file (``--config``) and long-form flags,
in that order of precedence. The effective configuration is echoed to
``config.txt`` in the run directory ``<out>/<run_id>/``; that file can be fed
back through ``--config`` to rebuild the same data for later subcommands.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, cachesim, synthdata
from .attention import (AttentionConfig, MetricsReport, ModelConfig, decode_model, encode_model,
                        evaluate_predictions, predict)
from .collective import CollectiveConfig, collective_forward, write_bytes_atomic
from .errors import (CacheMissError, NumericError, ShapeError, StorageError, UndefinedMetricError,
                     UsageError)
from .numkit import Rng
from .report import config_hash, write_csv
from .train import TrainConfig, Trainer, evaluate

log = logging.getLogger("collectivekv")

OUT_ROOT_ENV = "CKV_OUT_ROOT"
REFERENCE_BATCH_SIZES = (1, 8, 32, 64, 128, 256, 512)
ABLATION_ARMS = ("baseline", "collective", "peak", "balance", "all", "collective_k", "collective_v",
                 "collective_kv")
STUDIES = ("similarity", "svd-split", "router-viz", "overlap", "longtail")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


@dataclass(frozen=True)
class RunConfig:
    # synthetic data
    num_users: int = 500
    num_items: int = 2000
    num_groups: int = 8
    embed_dim: int = 32
    latent_rank: int = 10
    min_len: int = 40
    max_len: int = 120
    noise_scale: float = 0.3
    label_temperature: float = 0.25
    item_noise: float = 0.01
    shared_scale: float = 1.0
    selection_temperature: float = 0.5
    targets_per_user: int = 8
    length_coupling: float = 0.0
    data_seed: int = 0
    train_fraction: float = 0.8
    # model
    mode: str = "collective"          # baseline | collective
    d_u: int = 4
    d_g: int = 28
    d_a: int = 0                      # 0: derived as d_u + d_g
    pool_size: int = 64
    peak_weight: float = 0.01
    balance_weight: float = 1.0
    share: str = "kv"                 # k | v | kv
    tie_routers: bool = False
    attention: str = "target"         # target | self
    # trainer
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 0.01
    seed: int = 0
    # cache
    elem_width: int = 4
    idx_width: int = 2
    # output (not part of the config hash)
    out: str = "runs"
    run_id: str = ""

    def problems(self) -> list[str]:
        out = []
        if self.mode not in ("baseline", "collective"):
            out.append(f"mode must be baseline or collective, got {self.mode!r}")
        if self.share not in ("k", "v", "kv"):
            out.append(f"share must be k, v or kv, got {self.share!r}")
        if self.attention not in ("target", "self"):
            out.append(f"attention must be target or self, got {self.attention!r}")
        if self.d_a and self.d_a != self.d_u + self.d_g:
            out.append(f"d_a = {self.d_a} but d_u + d_g = {self.d_u + self.d_g}")
        if self.elem_width not in cachesim.ELEM_DTYPES:
            out.append(f"elem_width must be one of {sorted(cachesim.ELEM_DTYPES)}, got {self.elem_width}")
        if self.idx_width not in cachesim.INDEX_DTYPES:
            out.append(f"idx_width must be one of {sorted(cachesim.INDEX_DTYPES)}, got {self.idx_width}")
        elif self.mode == "collective" and not cachesim.index_width_fits(self.pool_size, self.idx_width):
            out.append(f"pool_size {self.pool_size} does not fit {self.idx_width}-byte indices")
        if not 0 < self.train_fraction < 1:
            out.append("train_fraction must be in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            out.append("need epochs >= 0, batch_size >= 1 and learning_rate > 0")
        for check in (self.synth_config().validate, self.model_config().validate):
            try:
                check()
            except UsageError as exc:
                out.append(str(exc))
        return out

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise UsageError("invalid configuration:\n  " + "\n  ".join(problems))
        return self

    def synth_config(self) -> synthdata.SynthConfig:
        names = {f.name for f in fields(synthdata.SynthConfig)}
        values = {k: v for k, v in asdict(self).items() if k in names and k != "seed"}
        return synthdata.SynthConfig(seed=self.data_seed, **values)

    def model_config(self) -> ModelConfig:
        collective = self.mode == "collective"
        cfg = CollectiveConfig(
            embed_dim=self.embed_dim, user_dim=self.d_u, global_dim=self.d_g, pool_size=self.pool_size,
            peak_weight=self.peak_weight, balance_weight=self.balance_weight,
            share_keys=collective and "k" in self.share, share_values=collective and "v" in self.share,
            tie_routers=self.tie_routers,
        )
        return ModelConfig(cfg, AttentionConfig(self.attention))

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.seed)

    def text(self) -> str:
        """``key = value`` lines; output location keys are written as comments."""
        lines = []
        for k, v in asdict(self).items():
            prefix = "# " if k in ("out", "run_id") else ""
            lines.append(f"{prefix}{k} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return config_hash("".join(l + "\n" for l in self.text().splitlines() if not l.startswith("#")))


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind in ("bool", bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"config line {lineno}: expected 'key = value', got {line!r}")
        if key not in _FIELD_TYPES:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def resolve_config(args: argparse.Namespace, env: Optional[dict] = None) -> RunConfig:
    """defaults < ``$CKV_OUT_ROOT`` (out only) < config file < flags."""
    env = os.environ if env is None else env
    values: dict = {}
    if env.get(OUT_ROOT_ENV):
        values["out"] = env[OUT_ROOT_ENV]
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc}") from exc
        values.update(parse_config_text(text))
    for key in _FIELD_TYPES:
        raw = getattr(args, key, None)
        if raw is not None:
            values[key] = _convert(key, str(raw))
    return RunConfig(**values).validate()


# ---------------------------------------------------------------------------
# Shared plumbing

@dataclass
class RunContext:
    command: str
    config: RunConfig
    directory: Path

    @property
    def cfg_hash(self) -> str:
        return self.config.hash()

    def csv(self, name: str, columns, rows) -> Path:
        return write_csv(self.directory / name, columns, rows, self.cfg_hash)

    def text(self, name: str, body: str) -> Path:
        path = self.directory / name
        try:
            write_bytes_atomic(path, body.encode())
        except OSError as exc:
            raise StorageError(f"cannot write {path}: {exc}") from exc
        return path


def open_run(command: str, rc: RunConfig) -> RunContext:
    run_id = rc.run_id or f"{command}-{rc.hash()[:8]}"
    directory = Path(rc.out) / run_id
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create run directory {directory}: {exc}") from exc
    ctx = RunContext(command, replace(rc, run_id=run_id), directory)
    ctx.text("config.txt", ctx.config.text())
    log.info("run directory %s", directory)
    return ctx


def load_data(rc: RunConfig):
    dataset = synthdata.generate(rc.synth_config())
    train_ds, eval_ds = synthdata.split(dataset, rc.train_fraction, seed=rc.data_seed)
    return dataset, train_ds, eval_ds


def write_manifest(ctx: RunContext, dataset) -> str:
    checksum = dataset.checksum()
    ctx.text("data_manifest.txt", dataset.config.manifest() + f"checksum = {checksum}\n")
    return checksum


def _check_finite_metrics(metrics: dict, what: str) -> None:
    for k, v in metrics.items():
        if not math.isfinite(v):
            raise NumericError(f"{what}: {k} is {v}")


@dataclass
class ArmResult:
    params: dict
    history: list
    metrics: dict
    compression_rate: float


def train_arm(rc: RunConfig, train_ds, eval_ds) -> ArmResult:
    mc = rc.model_config()
    trainer = Trainer(mc, rc.train_config())
    result = trainer.fit(train_ds.batches())
    metrics = evaluate(eval_ds.batches(), result.params, mc)
    _check_finite_metrics(metrics, "evaluation")
    cr = cachesim.compression_rate_for(mc, rc.elem_width, rc.idx_width)
    return ArmResult(result.params, result.history, metrics, cr)


def metrics_row(run_id: str, rc: RunConfig, arm: ArmResult) -> MetricsReport:
    m = arm.metrics
    return MetricsReport(run_id, rc.mode, rc.d_u, rc.d_g, rc.pool_size, m["auc"], m["gauc"], m["logloss"],
                         arm.compression_rate)


EPOCH_COLUMNS = ("epoch", "loss", "bce", "aux", "peak", "balance", "mean_gate")


def epoch_rows(history) -> list[list]:
    return [[e.epoch] + [f"{getattr(e, c):.8f}" for c in EPOCH_COLUMNS[1:]] for e in history]


def load_checkpoint(path: Optional[str], rc: RunConfig, required_for: str):
    if not path:
        raise UsageError(f"{required_for} needs --checkpoint (train a model first)")
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc
    mc, params = decode_model(data)
    if mc.collective.embed_dim != rc.embed_dim:
        raise UsageError(f"checkpoint embed_dim {mc.collective.embed_dim} does not match data embed_dim "
                         f"{rc.embed_dim}; pass the training run's config.txt via --config")
    return mc, params


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def baseline_tier(mc: ModelConfig, dataset, elem_width: int) -> cachesim.TierModel:
    """Reference tier scaled to this dataset's mean full-KV entry size."""
    mean_n = float(np.mean([u.history.size for u in dataset.users]))
    return cachesim.fit_reference_tier(2.0 * mean_n * mc.attn_dim * elem_width)


# ---------------------------------------------------------------------------
# Subcommands

def cmd_train(args, rc: RunConfig) -> int:
    ctx = open_run("train", rc)
    dataset, train_ds, eval_ds = load_data(rc)
    write_manifest(ctx, dataset)
    arm = train_arm(rc, train_ds, eval_ds)
    ctx.csv("epochs.csv", EPOCH_COLUMNS, epoch_rows(arm.history))
    report = metrics_row(ctx.config.run_id, rc, arm)
    ctx.csv("metrics.csv", MetricsReport.CSV_COLUMNS, [report.row()])
    path = ctx.directory / "checkpoint.ckv"
    try:
        write_bytes_atomic(path, encode_model(rc.model_config(), arm.params))
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc
    print(f"{rc.mode}: auc={report.auc:.4f} gauc={report.gauc:.4f} logloss={report.logloss:.4f} "
          f"cr={report.compression_rate:.4f} -> {ctx.directory}")
    return EXIT_OK


def arm_config(rc: RunConfig, arm: str) -> RunConfig:
    base = replace(rc, mode="collective")
    table = {
        "baseline": replace(rc, mode="baseline"),
        "collective": replace(base, share="kv", peak_weight=0.0, balance_weight=0.0),
        "peak": replace(base, share="kv", balance_weight=0.0),
        "balance": replace(base, share="kv", peak_weight=0.0),
        "all": replace(base, share="kv"),
        "collective_k": replace(base, share="k"),
        "collective_v": replace(base, share="v"),
        "collective_kv": replace(base, share="kv"),
    }
    if arm not in table:
        raise UsageError(f"unknown arm {arm!r}; choose from {', '.join(ABLATION_ARMS)}")
    return table[arm].validate()


ABLATE_COLUMNS = ("arm",) + MetricsReport.CSV_COLUMNS + ("peak_loss", "balance_loss", "data_checksum")


def cmd_ablate(args, rc: RunConfig) -> int:
    arms = args.arms.split(",") if args.arms else list(ABLATION_ARMS)
    configs = [(arm, arm_config(rc, arm)) for arm in arms]
    ctx = open_run("ablate", rc)
    dataset, train_ds, eval_ds = load_data(rc)
    checksum = write_manifest(ctx, dataset)
    rows = []
    for arm, cfg in configs:
        log.info("arm %s", arm)
        res = train_arm(cfg, train_ds, eval_ds)
        last = res.history[-1] if res.history else None
        peak = last.peak if last else 0.0
        bal = last.balance if last else 0.0
        rows.append([arm] + metrics_row(f"{ctx.config.run_id}/{arm}", cfg, res).row()
                    + [f"{peak:.6f}", f"{bal:.6f}", checksum])
        print(f"{arm:14s} auc={res.metrics['auc']:.4f} cr={res.compression_rate:.4f}")
    ctx.csv("ablate.csv", ABLATE_COLUMNS, rows)
    print(f"-> {ctx.directory}")
    return EXIT_OK


SWEEP_COLUMNS = ("axis", "value") + MetricsReport.CSV_COLUMNS


def sweep_configs(rc: RunConfig, axis: str, values: Sequence[int]) -> list[RunConfig]:
    if len(values) < 2:
        raise UsageError("a sweep needs at least 2 values")
    if axis == "d_u":
        d_a = rc.d_u + rc.d_g
        bad = [v for v in values if not 1 <= v <= d_a]
        if bad:
            raise UsageError(f"d_u values must lie in [1, {d_a}] (d_a = d_u + d_g is held fixed), got {bad}")
        return [replace(rc, d_u=v, d_g=d_a - v, d_a=0).validate() for v in values]
    if axis == "pool_size":
        return [replace(rc, pool_size=v).validate() for v in values]
    raise UsageError(f"sweep axis must be d_u or pool_size, got {axis!r}")


def cmd_sweep(args, rc: RunConfig) -> int:
    axis = args.axis.replace("-", "_")
    configs = sweep_configs(rc, axis, _int_list(args.values))
    ctx = open_run(f"sweep-{axis.replace('_', '-')}", rc)
    dataset, train_ds, eval_ds = load_data(rc)
    write_manifest(ctx, dataset)
    rows = []
    for cfg in configs:
        value = getattr(cfg, axis)
        log.info("%s = %d", axis, value)
        res = train_arm(cfg, train_ds, eval_ds)
        rows.append([axis, value] + metrics_row(f"{ctx.config.run_id}/{axis}={value}", cfg, res).row())
        print(f"{axis}={value:<4d} auc={res.metrics['auc']:.4f} cr={res.compression_rate:.4f}")
    ctx.csv("sweep.csv", SWEEP_COLUMNS, rows)
    print(f"-> {ctx.directory}")
    return EXIT_OK


def _user_kv(dataset, mc: Optional[ModelConfig], params: Optional[dict], target: str) -> list[np.ndarray]:
    """Per-user K (or V): model projections when a checkpoint is given, raw
    history embeddings otherwise."""
    out = []
    for b in dataset.batches():
        if mc is None:
            out.append(b.history)
        else:
            fwd = collective_forward(b.history, mc.collective, params, "inference")
            out.append(fwd.K if target == "key" else fwd.V)
    return out


def _summary_text(summary: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in summary.items())


def _density_rows(study, label: str) -> list[list]:
    return [[label, f"{x:.6f}", f"{d:.6f}"] for x, d in zip(study.grid, study.density)]


def _sample_rows(study) -> list[list]:
    return [[s.variant, s.target, s.user_a, s.user_b, f"{s.cosine:.8f}"] for s in study.samples]


SAMPLE_COLUMNS = ("variant", "target", "user_a", "user_b", "cosine")
DENSITY_COLUMNS = ("variant", "x", "density")


def _anchors(args, rc: RunConfig, n_users: int) -> list[int]:
    if args.anchors >= n_users:
        raise UsageError(f"--anchors must be below the number of users ({n_users})")
    return sorted(int(i) for i in Rng(rc.seed).spawn("anchors").choice(n_users, args.anchors, replace=False))


def study_similarity(ctx, args, rc, dataset, model) -> dict:
    mc, params = model
    ids = [u.user_id for u in dataset.users]
    users = _user_kv(dataset, mc, params, args.target)
    study = analysis.cross_user_similarity(users, _anchors(args, rc, len(users)), ids, args.target)
    ctx.csv("similarity_samples.csv", SAMPLE_COLUMNS, _sample_rows(study))
    ctx.csv("similarity_density.csv", DENSITY_COLUMNS, _density_rows(study, "mean"))
    return study.summary()


def study_svd_split(ctx, args, rc, dataset, model) -> dict:
    mc, params = model
    ids = [u.user_id for u in dataset.users]
    users = _user_kv(dataset, mc, params, args.target)
    k = args.k or rc.latent_rank
    study = analysis.split_similarity_study(users, k, _anchors(args, rc, len(users)), ids, args.target)
    ctx.csv("split_samples.csv", SAMPLE_COLUMNS, _sample_rows(study.principal) + _sample_rows(study.residual))
    ctx.csv("split_density.csv", DENSITY_COLUMNS,
            _density_rows(study.principal, "principal") + _density_rows(study.residual, "residual"))
    ctx.csv("split_retained.csv", ("user_id", "retained"),
            [[i, f"{r:.10f}"] for i, r in zip(ids, study.retained)])
    return {"k": k, **study.summary()}


def _entries(dataset, mc, params, rc) -> list:
    return [cachesim.prefill(b.user_id, b.history, params, mc, None, rc.elem_width, rc.idx_width)
            for b in dataset.batches()]


def _require_collective(mc: ModelConfig, study: str) -> None:
    if not mc.collective.active_sides:
        raise UsageError(f"{study} needs a collective checkpoint; this one is a baseline model")


def study_router_viz(ctx, args, rc, dataset, model) -> dict:
    mc, params = model
    _require_collective(mc, "router-viz")
    entries = _entries(dataset, mc, params, rc)
    m = mc.collective.pool_size
    hk = analysis.activation_histogram(entries, args.bin_size, m, "k")
    hv = analysis.activation_histogram(entries, args.bin_size, m, "v")
    edges = hk.edges
    rows = [[int(edges[i]), int(min(edges[i + 1], m)), int(hk.counts[i]), int(hv.counts[i])]
            for i in range(hk.counts.size)]
    ctx.csv("router_hist.csv", ("bin_start", "bin_end", "count_k", "count_v"), rows)
    return {"bin_size": args.bin_size, "bins": hk.counts.size, "max_share_k": hk.max_share(),
            "max_share_v": hv.max_share()}


def overlap_pairs(dataset, n_pairs: int, min_cosine: float, rng: Rng):
    """Sample ``n_pairs`` similar same-group pairs and ``n_pairs`` random
    cross-group pairs. Returns lists of ``(i, j, cosine)``."""
    users = dataset.users
    means = [dataset.item_embeddings[u.history].mean(axis=0) for u in users]
    groups = np.array([u.group for u in users])
    same, cross = [], []
    order = rng.permutation(len(users))
    for a_pos, i in enumerate(order):
        for j in order[a_pos + 1:]:
            if len(same) >= n_pairs:
                break
            if groups[i] == groups[j]:
                c = analysis.cosine(means[i], means[j])
                if c is not None and c >= min_cosine:
                    same.append((int(i), int(j), c))
        if len(same) >= n_pairs:
            break
    attempts = 0
    while len(cross) < n_pairs and attempts < 100 * n_pairs:
        attempts += 1
        i, j = (int(x) for x in rng.choice(len(users), 2, replace=False))
        if groups[i] != groups[j]:
            cross.append((i, j, analysis.cosine(means[i], means[j])))
    return same, cross


def study_overlap(ctx, args, rc, dataset, model) -> dict:
    mc, params = model
    _require_collective(mc, "overlap")
    same, cross = overlap_pairs(dataset, args.pairs, args.min_cosine, Rng(rc.seed).spawn("overlap"))
    if not same or not cross:
        raise UsageError("could not sample both same-group and cross-group pairs; lower --min-cosine")
    entries = _entries(dataset, mc, params, rc)
    rows, results = [], {"same": [], "cross": []}
    for kind, pairs in (("same", same), ("cross", cross)):
        for i, j, c in pairs:
            ok = analysis.overlap_ratio(entries[i], entries[j], "k")
            ov = analysis.overlap_ratio(entries[i], entries[j], "v")
            results[kind].append(ok)
            rows.append([kind, entries[i].user_id, entries[j].user_id, f"{c:.6f}", f"{ok:.6f}", f"{ov:.6f}"])
    ctx.csv("overlap.csv", ("kind", "user_a", "user_b", "mean_cosine", "overlap_k", "overlap_v"), rows)
    return {"same_pairs": len(same), "cross_pairs": len(cross),
            "same_median_k": float(np.median(results["same"])),
            "cross_median_k": float(np.median(results["cross"]))}


def study_longtail(ctx, args, rc, dataset, model) -> dict:
    mc, params = model
    _, eval_ds = synthdata.split(dataset, rc.train_fraction, seed=rc.data_seed)
    scorer = lambda batches: predict(batches, params, mc, "inference")
    rows = []
    for rate in _float_list(args.rates):
        sliced, _ = analysis.longtail_slice(eval_ds, rate)
        try:
            metrics = evaluate_slice(sliced, scorer)
        except UndefinedMetricError as exc:
            log.warning("rate %s: %s", rate, exc)
            metrics = {"auc": float("nan"), "gauc": float("nan"), "logloss": float("nan")}
        rows.append([rate, len(sliced.users), f"{metrics['auc']:.6f}", f"{metrics['gauc']:.6f}",
                     f"{metrics['logloss']:.6f}"])
    ctx.csv("longtail.csv", ("rate", "users", "auc", "gauc", "logloss"), rows)
    return {"rates": args.rates}


def evaluate_slice(sliced, scorer) -> dict:
    return evaluate_predictions(scorer(sliced.batches()))


STUDY_FUNCS = {
    "similarity": study_similarity,
    "svd-split": study_svd_split,
    "router-viz": study_router_viz,
    "overlap": study_overlap,
    "longtail": study_longtail,
}
CHECKPOINT_STUDIES = ("router-viz", "overlap", "longtail")


def cmd_analyze(args, rc: RunConfig) -> int:
    if args.study not in STUDY_FUNCS:
        raise UsageError(f"unknown study {args.study!r}; choose from {', '.join(STUDIES)}")
    if args.study in CHECKPOINT_STUDIES or args.checkpoint:
        model = load_checkpoint(args.checkpoint, rc, f"analyze --study {args.study}")
    else:
        model = (None, None)
    if args.anchors < 1:
        raise UsageError("--anchors must be >= 1")
    ctx = open_run(f"analyze-{args.study}", rc)
    dataset = synthdata.generate(rc.synth_config())
    write_manifest(ctx, dataset)
    summary = STUDY_FUNCS[args.study](ctx, args, rc, dataset, model)
    ctx.text("summary.txt", _summary_text(summary))
    for k, v in summary.items():
        print(f"{k} = {v}")
    print(f"-> {ctx.directory}")
    return EXIT_OK


def _cache_dir(args, ctx_dir: Optional[Path], rc: RunConfig) -> Path:
    if args.cache_dir:
        return Path(args.cache_dir)
    if ctx_dir is not None:
        return ctx_dir / "cache"
    raise UsageError("--cache-dir is required (point it at a prefill run's cache directory)")


def cmd_prefill(args, rc: RunConfig) -> int:
    mc, params = load_checkpoint(args.checkpoint, rc, "prefill")
    ctx = open_run("prefill", rc)
    dataset = synthdata.generate(rc.synth_config())
    write_manifest(ctx, dataset)
    store = cachesim.CacheStore(_cache_dir(args, ctx.directory, rc))
    users = dataset.users if args.users is None else dataset.users[:args.users]
    rows = []
    for u in users:
        entry = cachesim.prefill(u.user_id, dataset.item_embeddings[u.history], params, mc, store,
                                 rc.elem_width, rc.idx_width)
        rows.append([u.user_id, entry.n, entry.byte_size])
    ctx.csv("prefill.csv", ("user_id", "n", "bytes"), rows)
    print(f"prefilled {len(rows)} users into {store.root}")
    return EXIT_OK


def cmd_decode(args, rc: RunConfig) -> int:
    mc, params = load_checkpoint(args.checkpoint, rc, "decode")
    store = cachesim.CacheStore(_cache_dir(args, None, rc))
    dataset = synthdata.generate(rc.synth_config())
    try:
        user = dataset.user(args.user)
    except KeyError:
        raise UsageError(f"user {args.user!r} is not in the dataset") from None
    result = cachesim.decode(user.user_id, dataset.item_embeddings[user.target_items], params, mc, store,
                             baseline_tier(mc, dataset, rc.elem_width))
    ctx = open_run(f"decode-{user.user_id}", rc)
    rows = [[user.user_id, int(t), f"{p:.10f}", int(l)]
            for t, p, l in zip(user.target_items, result.probs, user.labels)]
    ctx.csv("decode.csv", ("user_id", "target_item", "prob", "label"), rows)
    print(f"{user.user_id}: {len(rows)} candidates, entry {result.entry_bytes} B, "
          f"simulated load {result.simulated_ms:.4f} ms -> {ctx.directory}")
    return EXIT_OK


def cmd_bench(args, rc: RunConfig) -> int:
    mc, params = load_checkpoint(args.checkpoint, rc, "bench")
    _require_collective(mc, "bench")
    if args.repeats < 20:
        raise UsageError("--repeats must be >= 20")
    store = cachesim.CacheStore(_cache_dir(args, None, rc))
    if len(store) == 0:
        raise UsageError(f"cache {store.root} is empty; run prefill first")
    entries = [store.get(uid) for uid in store.user_ids()]
    if not all(isinstance(e, cachesim.CacheEntry) for e in entries):
        raise UsageError("bench needs a cache prefilled from a collective checkpoint")
    dataset = synthdata.generate(rc.synth_config())
    tier = baseline_tier(mc, dataset, entries[0].elem_width)
    batch_sizes = _int_list(args.batch_sizes)
    if not batch_sizes or min(batch_sizes) < 1:
        raise UsageError("batch sizes must be positive")
    rows = cachesim.bench_latency(entries, params, mc, batch_sizes, tier, repeats=args.repeats)
    ctx = open_run("bench", rc)
    ctx.csv("bench.csv", cachesim.BenchRow.CSV_COLUMNS, [r.row() for r in rows])
    for r in rows:
        print(f"batch {r.batch_size:4d}: baseline {r.baseline_ms:9.4f} ms  collective {r.collective_ms:8.4f} ms"
              f"  ratio {r.ratio:7.2f}")
    print(f"-> {ctx.directory}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "prefill": cmd_prefill,
    "decode": cmd_decode,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------------------
# Argument parsing

def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--quiet", action="store_true", help="only warnings on stderr")
    group = p.add_argument_group("run configuration")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        extra = ["--pool"] if f.name == "pool_size" else []
        if f.type in ("bool", bool):
            group.add_argument(flag, *extra, dest=f.name, nargs="?", const="true", default=None,
                               metavar="BOOL", help=f"default {f.default}")
        else:
            group.add_argument(flag, *extra, dest=f.name, default=None, metavar=f.name.upper(),
                               help=f"default {f.default!r}")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="collectivekv", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train one model and write checkpoint + metrics")

    p = sub.add_parser("ablate", parents=[common], help="train every ablation arm on one dataset")
    p.add_argument("--arms", help=f"comma-separated subset of {','.join(ABLATION_ARMS)}")

    p = sub.add_parser("sweep", parents=[common], help="train one model per axis value")
    p.add_argument("--axis", required=True, help="d_u or pool_size")
    p.add_argument("--values", required=True, help="comma-separated integers")

    p = sub.add_parser("analyze", parents=[common], help="similarity and router studies")
    p.add_argument("--study", required=True, choices=STUDIES)
    p.add_argument("--checkpoint")
    p.add_argument("--target", choices=("key", "value"), default="key")
    p.add_argument("--anchors", type=int, default=1, help="number of anchor users, drawn with --seed")
    p.add_argument("--k", type=int, default=0, help="principal rank for svd-split (default latent_rank)")
    p.add_argument("--bin-size", type=int, default=50)
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--min-cosine", type=float, default=0.8)
    p.add_argument("--rates", default="0.1,0.2,0.5,1.0")

    p = sub.add_parser("prefill", parents=[common], help="write cache entries for the dataset's users")
    p.add_argument("--checkpoint")
    p.add_argument("--cache-dir")
    p.add_argument("--users", type=int, default=None, help="only the first N users")

    p = sub.add_parser("decode", parents=[common], help="score one user's candidates from the cache")
    p.add_argument("--checkpoint")
    p.add_argument("--cache-dir")
    p.add_argument("--user", required=True)

    p = sub.add_parser("bench", parents=[common], help="batch load latency against a prefilled cache")
    p.add_argument("--checkpoint")
    p.add_argument("--cache-dir")
    p.add_argument("--batch-sizes", default=",".join(map(str, REFERENCE_BATCH_SIZES)))
    p.add_argument("--repeats", type=int, default=20)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        rc = resolve_config(args)
        return COMMANDS[args.command](args, rc)
    except (UsageError, ShapeError, UndefinedMetricError, CacheMissError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
