"""Training loop: sample, embed, update the bank, composite loss, Adam step."""

from __future__ import annotations

import csv
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import drpl, gsam
from .errors import CheckpointError, ConfigurationError, NumericError
from .gsam import GsamConfig, MemoryBank, MemoryMode
from .model import ModelDims, ModelParams, init_params, loss_and_grad
from .sampler import rng_state, sample_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8


@dataclass(frozen=True)
class MemoryConfig:
    mode: MemoryMode = MemoryMode.PU_AU
    alpha: float = 0.9
    beta: float = 0.9
    renormalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", MemoryMode(self.mode))


@dataclass(frozen=True)
class TrainConfig:
    model: ModelDims = field(default_factory=ModelDims)
    P: int = 8
    K: int = 4
    drpl: drpl.DRPLSchedule = field(default_factory=drpl.DRPLSchedule)
    gsam: GsamConfig = field(default_factory=GsamConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    total_iters: int = 2000
    seed: int = 0
    use_drpl_bh: bool = True
    use_gsam: bool = True
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        # the schedule length always follows total_iters
        if self.drpl.total_iters != self.total_iters:
            object.__setattr__(self, "drpl", replace(self.drpl, total_iters=self.total_iters))

    @property
    def schedule(self):
        return self.drpl

    def validate(self):
        self.model.validate()
        self.schedule.validate()
        if self.total_iters < 1:
            raise ConfigurationError(f"total_iters must be >= 1, got {self.total_iters}")
        if not self.optimizer.learning_rate >= 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.optimizer.learning_rate}")
        if self.P < 2 or self.K < 2:
            raise ConfigurationError(f"P and K must be >= 2, got P={self.P}, K={self.K}")
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise ConfigurationError("log_every must be >= 1 and checkpoint_every >= 0")
        return self

    def to_dict(self):
        d = asdict(self)
        d["gsam"]["variance_mode"] = self.gsam.variance_mode.value
        d["memory"]["mode"] = self.memory.mode.value
        return d

    @classmethod
    def from_dict(cls, d):
        nested = {"model": ModelDims, "drpl": drpl.DRPLSchedule, "gsam": GsamConfig,
                  "memory": MemoryConfig, "optimizer": OptimizerConfig}
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in known:
                raise ConfigurationError(f"unknown config field {key!r}")
            if key in nested:
                sub = nested[key]
                sub_known = {f.name for f in fields(sub)}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigurationError(f"unknown config field(s) {key}.{sorted(bad)}")
                try:
                    value = sub(**value)
                except ValueError as exc:
                    raise ConfigurationError(f"{key}: {exc}") from None
            kwargs[key] = value
        return cls(**kwargs)


class Adam:
    """Adaptive-moment step over the four parameter arrays."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.step_count = 0
        self.m = ModelParams.zeros_like(params)
        self.v = ModelParams.zeros_like(params)

    def step(self, params, grads):
        c = self.cfg
        self.step_count += 1
        bc1 = 1.0 - c.beta1**self.step_count
        bc2 = 1.0 - c.beta2**self.step_count
        for name in ModelParams.NAMES:
            g = getattr(grads, name)
            m = c.beta1 * getattr(self.m, name) + (1.0 - c.beta1) * g
            v = c.beta2 * getattr(self.v, name) + (1.0 - c.beta2) * g * g
            setattr(self.m, name, m)
            setattr(self.v, name, v)
            update = c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.eps_adam)
            setattr(params, name, getattr(params, name) - update)
        return params


LOG_COLUMNS = ("t", "loss_total", "loss_ba", "loss_bh", "loss_gsam_ce", "loss_gsam_var", "delta_t", "s_t", "gamma_t")


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def append(self, record):
        self.records.append(record)

    def column(self, name):
        return np.array([r[name] for r in self.records])

    def tail(self, after_t):
        return RunLog([r for r in self.records if r["t"] > after_t])

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for r in self.records:
                writer.writerow([r["t"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
        return path

    @classmethod
    def from_csv(cls, path):
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            return cls([{c: int(row[c]) if c == "t" else float(row[c]) for c in LOG_COLUMNS} for row in reader])

    def __eq__(self, other):
        return isinstance(other, RunLog) and self.records == other.records


def total_loss_and_grad(rows, labels, memory_rows, t, cfg):
    """Composite loss, its gradient with respect to ``rows``, and a breakdown dict."""
    sched = cfg.schedule
    dist = drpl.pairwise_distances(rows)
    value, g_dist, parts = drpl.drpl_loss_and_grad(dist, labels, t, sched, use_bh=cfg.use_drpl_bh)
    grad = drpl.distance_backward(rows, dist, g_dist)
    gamma_t = gsam.fusion_factor(t, cfg.total_iters)
    ce = var = 0.0
    if cfg.use_gsam:
        g_value, g_grad, g_parts = gsam.gsam_loss_and_grad(rows, labels, memory_rows, cfg.gsam)
        ce, var = g_parts.ce, g_parts.var
        value = value + gamma_t * g_value
        grad = grad + gamma_t * g_grad
    breakdown = {
        "t": t, "loss_total": value, "loss_ba": parts.ba, "loss_bh": parts.bh,
        "loss_gsam_ce": ce, "loss_gsam_var": var,
        "delta_t": parts.delta_t, "s_t": parts.s_t, "gamma_t": gamma_t,
    }
    return value, grad, breakdown


def total_loss(emb, labels, memory_rows, t, cfg):
    """Returns ``(value, breakdown)``; disabled terms contribute exactly zero."""
    rows = np.asarray(getattr(emb, "rows", emb), dtype=np.float64)
    value, _, breakdown = total_loss_and_grad(rows, labels, memory_rows, t, cfg)
    return value, breakdown


@dataclass
class TrainState:
    params: ModelParams
    memory: MemoryBank
    optimizer: Adam
    rng: dict
    t: int = 0


def initial_state(cfg, dataset):
    cfg = cfg.validate()
    if cfg.model.d_in != dataset.sequences[0].frames.shape[1]:
        raise ConfigurationError(
            f"model.d_in={cfg.model.d_in} does not match dataset frame width {dataset.sequences[0].frames.shape[1]}"
        )
    params = init_params(cfg.model, cfg.seed)
    memory = None
    if cfg.use_gsam:
        m = cfg.memory
        memory = gsam.init_memory(dataset, params, mode=m.mode, alpha=m.alpha, beta=m.beta, renormalize=m.renormalize)
    return TrainState(params, memory, Adam(cfg.optimizer, params), rng_state(cfg.seed), 0)


def run(cfg, dataset, resume=None, checkpoint_dir=None):
    """Run the training loop to ``cfg.total_iters``; returns ``(state, runlog)``.

    ``resume`` is a :class:`TrainState` (e.g. from :func:`load_checkpoint`);
    the returned log then only holds the iterations run here.
    """
    cfg = cfg.validate()
    state = resume if resume is not None else initial_state(cfg, dataset)
    runlog = RunLog()
    for t in range(state.t + 1, cfg.total_iters + 1):
        state = train_step(state, cfg, dataset, t, runlog)
        if checkpoint_dir is not None and cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"checkpoint_{t:07d}.hmck", state, cfg)
    return state, runlog


def train(cfg, dataset, resume=None, checkpoint_dir=None):
    """Returns ``(params, memory, runlog)``; see :func:`run`."""
    state, runlog = run(cfg, dataset, resume, checkpoint_dir)
    return state.params, state.memory, runlog


def train_step(state, cfg, dataset, t, runlog=None):
    batch, state.rng = sample_batch(dataset, cfg.P, cfg.K, state.rng)
    record = {}

    def objective(emb):
        # the bank is refreshed from this iteration's embeddings before the loss reads it
        if cfg.use_gsam:
            state.memory = gsam.update_memory(state.memory, emb, t)
        memory_rows = state.memory.rows if state.memory is not None else None
        value, grad, breakdown = total_loss_and_grad(emb.rows, emb.labels, memory_rows, t, cfg)
        record.update(breakdown)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at iteration {t}: {breakdown}", breakdown)
        return value, grad

    _, grads = loss_and_grad(state.params, batch.sequences, objective, context={"t": t})
    state.optimizer.step(state.params, grads)
    state.t = t
    if runlog is not None and (t % cfg.log_every == 0 or t == cfg.total_iters):
        runlog.append(record)
        if t % max(1, cfg.total_iters // 10) == 0:
            log.info("t=%d loss=%.5f ba=%.5f bh=%.5f ce=%.5f", t, record["loss_total"], record["loss_ba"],
                     record["loss_bh"], record["loss_gsam_ce"])
    return state


# -- checkpoint container ------------------------------------------------------
# magic, u32 version, u32 section count, then per section:
# 16-byte ascii name, u64 offset, u64 length, u32 crc32. Payloads follow.
# Array sections are a sequence of (u32 ndim, u64 shape..., little-endian f8 data).

MAGIC = b"HMCK1"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<5sII")
_ENTRY = struct.Struct("<16sQQI")


def _pack_arrays(arrays):
    out = bytearray()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        out += struct.pack("<I", a.ndim)
        out += struct.pack(f"<{a.ndim}Q", *a.shape)
        out += a.tobytes()
    return bytes(out)


def _unpack_arrays(buf):
    arrays, pos = [], 0
    while pos < len(buf):
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * n
    return arrays


def save_checkpoint(path, state, cfg):
    params, memory, opt = state.params, state.memory, state.optimizer
    meta = {
        "t": state.t,
        "config": cfg.to_dict(),
        "optimizer_steps": opt.step_count,
        "memory": None if memory is None else {
            "mode": memory.mode.value, "alpha": memory.alpha, "beta": memory.beta, "renormalize": memory.renormalize,
        },
    }
    sections = {
        "params": _pack_arrays(params.arrays().values()),
        "memory": _pack_arrays([] if memory is None else [memory.rows]),
        "optim": _pack_arrays(list(opt.m.arrays().values()) + list(opt.v.arrays().values())),
        "rng": json.dumps(state.rng, sort_keys=True).encode(),
        "config": json.dumps(meta, sort_keys=True).encode(),
    }
    offset = _HEADER.size + _ENTRY.size * len(sections)
    table, body = bytearray(), bytearray()
    for name, payload in sections.items():
        table += _ENTRY.pack(name.encode("ascii"), offset + len(body), len(payload), zlib.crc32(payload))
        body += payload
    path = Path(path)
    path.write_bytes(_HEADER.pack(MAGIC, CHECKPOINT_VERSION, len(sections)) + bytes(table) + bytes(body))
    return path


def load_checkpoint(path):
    """Returns ``(state, cfg)``; raises :class:`CheckpointError` on any defect."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(buf) < _HEADER.size:
        raise CheckpointError("checkpoint truncated")
    magic, version, n_sections = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})")
    sections = {}
    try:
        for k in range(n_sections):
            raw_name, off, length, crc = _ENTRY.unpack_from(buf, _HEADER.size + k * _ENTRY.size)
            name = raw_name.rstrip(b"\0").decode("ascii")
            payload = buf[off : off + length]
            if len(payload) != length or zlib.crc32(payload) != crc:
                raise CheckpointError(f"checkpoint section {name!r} is corrupted")
            sections[name] = payload
        meta = json.loads(sections["config"])
        cfg = TrainConfig.from_dict(meta["config"])
        params = ModelParams(*_unpack_arrays(sections["params"]))
        opt = Adam(cfg.optimizer, params)
        moments = _unpack_arrays(sections["optim"])
        opt.m, opt.v = ModelParams(*moments[:4]), ModelParams(*moments[4:])
        opt.step_count = int(meta["optimizer_steps"])
        memory = None
        if meta["memory"] is not None:
            (rows,) = _unpack_arrays(sections["memory"])
            memory = MemoryBank(rows, **meta["memory"])
        rng = json.loads(sections["rng"])
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError, struct.error, UnicodeDecodeError, ConfigurationError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    return TrainState(params, memory, opt, rng, int(meta["t"])), cfg
