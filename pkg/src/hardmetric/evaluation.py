"""Gallery/probe rank-1 evaluation with identical-view exclusion."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParseError, ProtocolError
from .gsam import embed_dataset
from .model import Condition
from .trainer import train


@dataclass(frozen=True)
class EvalProtocol:
    gallery_condition: Condition = Condition.BASE
    gallery_seqs: tuple = (0,)
    exclude_identical_view: bool = True
    # every sequence is both probe and gallery; a sanity mode
    self_retrieval: bool = False

    def __post_init__(self):
        object.__setattr__(self, "gallery_condition", Condition(self.gallery_condition))
        object.__setattr__(self, "gallery_seqs", tuple(int(s) for s in self.gallery_seqs))


@dataclass
class EvalTable:
    """Rank-1 accuracy (percent) per (probe condition, probe view)."""

    views: list
    conditions: list
    cells: dict = field(default_factory=dict)

    @property
    def condition_means(self):
        out = {}
        for c in self.conditions:
            vals = [self.cells[(c, v)] for v in self.views if (c, v) in self.cells]
            if vals:
                out[c] = float(np.mean(vals))
        return out

    @property
    def grand_mean(self):
        return float(np.mean(list(self.condition_means.values())))

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condition"] + [str(v) for v in self.views] + ["mean"])
        means = self.condition_means
        for c in self.conditions:
            if c not in means:
                continue
            row = [repr(self.cells[(c, v)]) if (c, v) in self.cells else "" for v in self.views]
            w.writerow([c] + row + [repr(means[c])])
        w.writerow(["mean"] + [""] * len(self.views) + [repr(self.grand_mean)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path):
        return cls.parse_csv(Path(path).read_text())

    @classmethod
    def parse_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][0] != "condition" or rows[0][-1] != "mean":
            raise ParseError("missing eval table header", 1)
        views = [int(v) for v in rows[0][1:-1]]
        table = cls(views=views, conditions=[])
        for lineno, row in enumerate(rows[1:], start=2):
            if row[0] == "mean":
                continue
            if len(row) != len(views) + 2:
                raise ParseError(f"expected {len(views) + 2} fields, got {len(row)}", lineno)
            table.conditions.append(row[0])
            for v, cell in zip(views, row[1:-1]):
                if cell:
                    table.cells[(row[0], v)] = float(cell)
        return table

    def __eq__(self, other):
        return (
            isinstance(other, EvalTable)
            and list(self.views) == list(other.views)
            and list(self.conditions) == list(other.conditions)
            and self.cells == other.cells
        )


def rank1_matches(probe_rows, probe_views, gallery_rows, gallery_views, exclude_identical_view=True):
    """Index of the nearest admissible gallery entry for every probe.

    Distance ties go to the lowest gallery index. Raises if a probe has no
    admissible gallery entry.
    """
    probe_rows = np.asarray(probe_rows, dtype=np.float64)
    gallery_rows = np.asarray(gallery_rows, dtype=np.float64)
    diff = probe_rows[:, None, :] - gallery_rows[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    admissible = np.ones(dist.shape, dtype=bool)
    if exclude_identical_view:
        admissible = np.asarray(probe_views)[:, None] != np.asarray(gallery_views)[None, :]
    empty = ~admissible.any(axis=1)
    if empty.any():
        raise ProtocolError(f"probe {int(np.flatnonzero(empty)[0])} has an empty admissible gallery")
    best = np.argmin(np.where(admissible, dist, np.inf), axis=1)
    if exclude_identical_view:
        assert not np.any(np.asarray(gallery_views)[best] == np.asarray(probe_views))
    return best


def split_gallery_probe(dataset, protocol):
    seqs = dataset.sequences
    if protocol.self_retrieval:
        everything = np.arange(len(seqs))
        return everything, everything
    in_gallery = np.array(
        [s.condition is protocol.gallery_condition and s.seq in protocol.gallery_seqs for s in seqs], dtype=bool
    )
    return np.flatnonzero(in_gallery), np.flatnonzero(~in_gallery)


def evaluate_embeddings(rows, dataset, protocol=None):
    """Evaluate precomputed embeddings (one row per dataset sequence)."""
    protocol = protocol or EvalProtocol()
    seqs = dataset.sequences
    rows = np.asarray(rows, dtype=np.float64)
    ids = np.array([s.id for s in seqs])
    views = np.array([s.view_deg for s in seqs])
    conds = np.array([s.condition.value for s in seqs])
    gallery, probes = split_gallery_probe(dataset, protocol)
    if gallery.size == 0:
        raise ProtocolError("gallery is empty")
    missing = set(ids[probes]) - set(ids[gallery])
    if missing:
        raise ProtocolError(f"identities without gallery entries: {sorted(missing)}")

    all_views = sorted(set(views.tolist()))
    all_conds = [c.value for c in Condition if c.value in set(conds.tolist())]
    table = EvalTable(views=all_views, conditions=all_conds)
    for c in all_conds:
        for v in all_views:
            cell = probes[(conds[probes] == c) & (views[probes] == v)]
            if cell.size == 0:
                continue
            try:
                best = rank1_matches(rows[cell], views[cell], rows[gallery], views[gallery],
                                     protocol.exclude_identical_view and not protocol.self_retrieval)
            except ProtocolError:
                raise ProtocolError(f"cell ({c}, {v}): admissible gallery is empty") from None
            hits = ids[gallery][best] == ids[cell]
            table.cells[(c, v)] = 100.0 * float(hits.mean())
    return table


def evaluate(params, dataset, protocol=None):
    return evaluate_embeddings(embed_dataset(params, dataset), dataset, protocol)


ABLATION_CELLS = {
    "baseline": (False, False),
    "+D": (True, False),
    "+G": (False, True),
    "++": (True, True),
}


@dataclass
class AblationReport:
    tables: dict

    def comparison_rows(self):
        names = list(self.tables)
        conditions = next(iter(self.tables.values())).conditions
        rows = []
        for c in conditions:
            rows.append([c] + [self.tables[n].condition_means.get(c, float("nan")) for n in names])
        rows.append(["mean"] + [self.tables[n].grand_mean for n in names])
        return names, rows

    def to_csv(self, path=None):
        names, rows = self.comparison_rows()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condition"] + names)
        for row in rows:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()

    def plot(self, path):
        """Grouped bar chart of per-condition means, written as deterministic SVG."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        names, rows = self.comparison_rows()
        with matplotlib.rc_context({"svg.hashsalt": "hardmetric", "svg.fonttype": "path"}):
            fig, ax = plt.subplots(figsize=(6.4, 3.6))
            width = 0.8 / len(names)
            xs = np.arange(len(rows))
            for k, name in enumerate(names):
                ax.bar(xs + (k - (len(names) - 1) / 2) * width, [r[1 + k] for r in rows], width, label=name)
            ax.set_xticks(xs)
            ax.set_xticklabels([r[0] for r in rows])
            ax.set_ylabel("rank-1 accuracy (%)")
            ax.set_ylim(0, 100)
            ax.legend(loc="lower right", fontsize="small")
            fig.tight_layout()
            fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
            plt.close(fig)
        return path


def ablation_report(dataset, base_cfg, protocol=None, test_dataset=None):
    """Train the four toggle cells from the same seed and evaluate each.

    Evaluation runs on ``test_dataset`` when given (held-out identities),
    otherwise on the training set.
    """
    tables = {}
    for name, (use_d, use_g) in ABLATION_CELLS.items():
        cfg = replace(base_cfg, use_drpl_bh=use_d, use_gsam=use_g)
        params, _, _ = train(cfg, dataset)
        tables[name] = evaluate(params, test_dataset if test_dataset is not None else dataset, protocol)
    return AblationReport(tables)
