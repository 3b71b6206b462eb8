"""Synthetic gait-like dataset with both kinds of hard samples.

Each identity owns a unit signature vector. Frames are the signature rotated
by the view angle inside a fixed 2-D plane, plus a condition-dependent
structured offset, a small sinusoidal gait-phase term and white noise.

* Occl zeroes a random 30% of the coordinates for the whole sequence.
* Deform adds a perturbation of norm ``condition_strength`` lying in a
  fixed rank-2 subspace.
* Confusion pairs share one signature up to a perturbation of norm
  ``signature_noise``, which makes them hard negatives for each other.

Identity ``i`` is driven by its own RNG stream keyed on ``id_offset + i``
while the rotation plane and deformation subspace depend on ``seed`` only,
so a held-out identity split is ``replace(spec, id_offset=n_ids)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, ParseError
from .model import Condition, FeatureSequence

FORMAT_VERSION = "hmds-1"
OCCLUSION_RATIO = 0.3
PHASE_AMPLITUDE = 0.1
FRAME_NOISE = 0.05
DEFORM_RANK = 2

_STREAM_GLOBAL, _STREAM_ID, _STREAM_SEQ = 0, 1, 2


@dataclass(frozen=True)
class DatasetSpec:
    n_ids: int = 32
    views: tuple = (0, 45, 90, 135)
    conditions: tuple = (Condition.BASE, Condition.OCCL, Condition.DEFORM)
    seqs_per_cell: int = 2
    n_frames: int = 12
    d_in: int = 16
    signature_noise: float = 0.1
    condition_strength: float = 3.0
    confusion_pairs: int = 8
    seed: int = 0
    id_offset: int = 0

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(int(v) for v in self.views))
        try:
            conds = tuple(Condition(c) for c in self.conditions)
        except ValueError as exc:
            raise ConfigurationError(f"conditions: {exc}") from None
        object.__setattr__(self, "conditions", conds)

    def validate(self):
        if self.n_ids < 2:
            raise ConfigurationError(f"n_ids must be >= 2, got {self.n_ids}")
        if not self.views:
            raise ConfigurationError("views must be non-empty")
        if len(set(self.views)) != len(self.views):
            raise ConfigurationError(f"views must be distinct, got {list(self.views)}")
        if any(not 0 <= v < 360 for v in self.views):
            raise ConfigurationError(f"views must lie in [0, 360), got {list(self.views)}")
        if not self.conditions or len(set(self.conditions)) != len(self.conditions):
            raise ConfigurationError("conditions must be non-empty and distinct")
        if not 0 <= self.confusion_pairs <= self.n_ids // 2:
            raise ConfigurationError(f"confusion_pairs must lie in [0, n_ids/2], got {self.confusion_pairs}")
        for name in ("seqs_per_cell", "n_frames"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_in < 2:
            raise ConfigurationError(f"d_in must be >= 2, got {self.d_in}")
        for name in ("signature_noise", "condition_strength"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.seed < 0 or self.id_offset < 0:
            raise ConfigurationError("seed and id_offset must be non-negative")
        return self

    def to_dict(self):
        d = asdict(self)
        d["views"] = list(self.views)
        d["conditions"] = [c.value for c in self.conditions]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown dataset spec field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class LabeledDataset:
    sequences: list
    n_ids: int
    spec: DatasetSpec = None
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index = {}
        for pos, s in enumerate(self.sequences):
            self.index.setdefault(s.id, []).append(pos)
        bad = [i for i in self.index if not 0 <= i < self.n_ids]
        if bad:
            raise ConfigurationError(f"identity labels outside [0, {self.n_ids}): {sorted(bad)}")
        missing = [i for i in range(self.n_ids) if i not in self.index]
        if missing:
            raise DataError(f"identities without sequences: {missing}")

    @property
    def labels(self):
        return np.array([s.id for s in self.sequences], dtype=np.int64)

    def __len__(self):
        return len(self.sequences)

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return self.n_ids == other.n_ids and self.sequences == other.sequences


def _quantize(a):
    # the file stores 9 significant digits; generating on that grid keeps save/load lossless
    return np.array([float(f"{x:.9g}") for x in a.ravel()]).reshape(a.shape)


def _orthonormal(rng, d, k):
    q, r = np.linalg.qr(rng.standard_normal((d, k)))
    return q * np.sign(np.diag(r))


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _global_structure(spec):
    grng = np.random.default_rng([spec.seed, _STREAM_GLOBAL])
    plane = _orthonormal(grng, spec.d_in, 2)
    deform_basis = _orthonormal(grng, spec.d_in, min(DEFORM_RANK, spec.d_in))
    perm = grng.permutation(spec.n_ids)
    pairs = [(int(perm[2 * k]), int(perm[2 * k + 1])) for k in range(spec.confusion_pairs)]
    return plane, deform_basis, pairs


def confusion_partners(spec):
    """Map each confused identity to its partner, in both directions."""
    out = {}
    for a, b in _global_structure(spec)[2]:
        out[a], out[b] = b, a
    return out


def generate(spec=None):
    spec = (spec or DatasetSpec()).validate()
    d = spec.d_in
    plane, deform_basis, pairs = _global_structure(spec)

    sig, jitter, gait_dirs = {}, {}, {}
    for i in range(spec.n_ids):
        irng = np.random.default_rng([spec.seed, _STREAM_ID, spec.id_offset + i])
        sig[i], gait_dirs[i], jitter[i] = _unit(irng, d), _unit(irng, d), _unit(irng, d)
    for a, b in pairs:
        sig[b] = sig[a] + spec.signature_noise * jitter[b]

    steps = np.arange(spec.n_frames)[:, None]
    sequences = []
    for i in range(spec.n_ids):
        for vi, view in enumerate(spec.views):
            theta = np.deg2rad(view)
            coords = plane.T @ sig[i]
            rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
            base = sig[i] - plane @ coords + plane @ (rot @ coords)
            for cond in spec.conditions:
                ci = list(Condition).index(cond)
                for s in range(spec.seqs_per_cell):
                    srng = np.random.default_rng([spec.seed, _STREAM_SEQ, spec.id_offset + i, vi, ci, s])
                    frame = base.copy()
                    if cond is Condition.OCCL:
                        hidden = srng.choice(d, size=int(round(OCCLUSION_RATIO * d)), replace=False)
                        frame[hidden] = 0.0
                    elif cond is Condition.DEFORM:
                        coef = _unit(srng, deform_basis.shape[1])
                        frame = frame + spec.condition_strength * (deform_basis @ coef)
                    phase = srng.uniform(0.0, 2.0 * np.pi)
                    wave = PHASE_AMPLITUDE * np.sin(2.0 * np.pi * steps / spec.n_frames + phase) * gait_dirs[i]
                    frames = frame + wave + FRAME_NOISE * srng.standard_normal((spec.n_frames, d))
                    sequences.append(FeatureSequence(i, view, cond, _quantize(frames), seq=s))
    return LabeledDataset(sequences, spec.n_ids, spec)


def _format_frames(frames):
    return "[" + ",".join("[" + ",".join(f"{x:.9g}" for x in row) + "]" for row in frames) + "]"


def save(dataset, path):
    path = Path(path)
    header = {
        "format": FORMAT_VERSION,
        "n_ids": dataset.n_ids,
        "n_records": len(dataset.sequences),
        "spec": dataset.spec.to_dict() if dataset.spec is not None else None,
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in dataset.sequences:
            meta = json.dumps({"id": s.id, "view_deg": s.view_deg, "condition": s.condition.value, "seq": s.seq})
            fh.write(meta[:-1] + ', "frames": ' + _format_frames(s.frames) + "}\n")
    return path


def _parse_record(line, lineno):
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid record: {exc.msg}", lineno) from None
    try:
        frames = np.asarray(rec["frames"], dtype=np.float64)
        return FeatureSequence(int(rec["id"]), int(rec["view_deg"]), rec["condition"], frames, seq=int(rec.get("seq", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed record: {exc}", lineno) from None


def load(path):
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty dataset file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid header: {exc.msg}", 1) from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_VERSION:
        raise ParseError(f"expected format {FORMAT_VERSION!r}", 1)
    try:
        spec = DatasetSpec.from_dict(header["spec"]) if header.get("spec") else None
        n_ids, n_records = int(header["n_ids"]), int(header["n_records"])
    except (KeyError, TypeError, ValueError, ConfigurationError) as exc:
        raise ParseError(f"invalid header: {exc}", 1) from None

    sequences, seen = [], {}
    for lineno, line in enumerate(lines[1:], start=2):
        seq = _parse_record(line, lineno)
        if seq.key in seen:
            raise ParseError(f"duplicate key (id, view, condition, seq) = {seq.key}, first seen on line {seen[seq.key]}", lineno)
        seen[seq.key] = lineno
        sequences.append(seq)
    if len(sequences) != n_records:
        raise ParseError(f"truncated file: header announces {n_records} records, found {len(sequences)}", len(lines) + 1)
    try:
        return LabeledDataset(sequences, n_ids, spec)
    except (ConfigurationError, DataError) as exc:
        raise ParseError(str(exc)) from None
