import math
from dataclasses import replace

import numpy as np
import pytest

from hardmetric.data import LabeledDataset
from hardmetric.errors import ParseError, ProtocolError
from hardmetric.evaluation import (
    ABLATION_CELLS,
    EvalProtocol,
    EvalTable,
    ablation_report,
    evaluate,
    evaluate_embeddings,
    rank1_matches,
    split_gallery_probe,
)
from hardmetric.model import Condition, FeatureSequence, ModelDims, init_params
from hardmetric.trainer import TrainConfig, train


def noise_dataset(seed, n_ids=32, views=(0, 45, 90, 135), seqs=2, d_in=16, n_frames=6):
    """The default layout with frames that carry no identity information."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_ids):
        for v in views:
            for c in Condition:
                for s in range(seqs):
                    out.append(FeatureSequence(i, v, c, rng.standard_normal((n_frames, d_in)), seq=s))
    return LabeledDataset(out, n_ids)


def chance_level_hits(n_seeds=20):
    hits = []
    for seed in range(n_seeds):
        ds = noise_dataset(seed)
        table = evaluate(init_params(ModelDims(16, 64, 32), seed), ds)
        gallery, probes = split_gallery_probe(ds, EvalProtocol())
        # every cell holds the same number of probes, so the mean of cells is the per-probe rate
        hits.append(np.mean(list(table.cells.values())) / 100.0 * len(probes))
    return np.array(hits), len(probes)


def test_self_retrieval_is_perfect(small_dataset, small_params):
    table = evaluate(small_params, small_dataset, EvalProtocol(self_retrieval=True))
    assert set(table.cells.values()) == {100.0} and table.grand_mean == 100.0


def test_gallery_and_probes_partition_the_dataset(small_dataset):
    gallery, probes = split_gallery_probe(small_dataset, EvalProtocol())
    assert len(set(gallery) | set(probes)) == len(small_dataset)
    assert not set(gallery) & set(probes)
    assert all(small_dataset.sequences[g].condition is Condition.BASE and small_dataset.sequences[g].seq == 0
               for g in gallery)


def test_label_independent_embeddings_sit_at_chance():
    hits, n_probes = chance_level_hits()
    n = n_probes * len(hits)
    p = 1.0 / 32
    rate = hits.sum() / n
    assert abs(rate - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_handcrafted_two_identities_are_perfect():
    seqs, rows = [], []
    for i, centre in enumerate(([1.0, 0.0], [0.0, 1.0])):
        for v in (0, 90):
            for c in Condition:
                for s in range(2):
                    seqs.append(FeatureSequence(i, v, c, np.zeros((1, 1)), seq=s))
                    rows.append(np.array(centre) + 0.01 * np.array([v / 90, s]))
    table = evaluate_embeddings(np.array(rows), LabeledDataset(seqs, 2), EvalProtocol())
    assert set(table.cells.values()) == {100.0}


def test_exclusion_never_matches_same_view(rng):
    probe_views = rng.choice([0, 45, 90], size=50)
    gallery_views = rng.choice([0, 45, 90], size=30)
    best = rank1_matches(rng.standard_normal((50, 4)), probe_views, rng.standard_normal((30, 4)), gallery_views)
    assert np.all(gallery_views[best] != probe_views)
    # without exclusion, a probe sitting on a same-view gallery entry picks it
    g = rng.standard_normal((3, 2))
    assert list(rank1_matches(g, [0, 0, 0], g, [0, 0, 0], exclude_identical_view=False)) == [0, 1, 2]


def test_ties_go_to_lowest_gallery_index():
    best = rank1_matches(np.zeros((1, 2)), [0], np.array([[1.0, 0], [0, 1.0], [-1.0, 0]]), [1, 1, 1])
    assert best[0] == 0


def test_gallery_order_does_not_matter(small_dataset, small_params, rng):
    table = evaluate(small_params, small_dataset)
    perm = rng.permutation(len(small_dataset))
    shuffled = LabeledDataset([small_dataset.sequences[i] for i in perm], small_dataset.n_ids)
    assert evaluate(small_params, shuffled) == table


def test_empty_admissible_gallery_names_the_cell(small_spec, small_params):
    from hardmetric.data import generate

    ds = generate(replace(small_spec, views=(90,)))
    with pytest.raises(ProtocolError, match=r"\(Base, 90\)|\(Occl, 90\)|\(Deform, 90\)"):
        evaluate(small_params, ds)
    assert evaluate(small_params, ds, EvalProtocol(exclude_identical_view=False)).cells


def test_missing_gallery_identity(small_dataset, small_params):
    with pytest.raises(ProtocolError):
        evaluate(small_params, small_dataset, EvalProtocol(gallery_seqs=(5,)))


def test_table_means_and_bounds(small_dataset, small_params):
    table = evaluate(small_params, small_dataset)
    assert all(0.0 <= x <= 100.0 for x in table.cells.values())
    for c, mean in table.condition_means.items():
        assert mean == pytest.approx(np.mean([table.cells[(c, v)] for v in table.views]))
    assert table.grand_mean == pytest.approx(np.mean(list(table.condition_means.values())))


def test_csv_round_trip(tmp_path, small_dataset, small_params):
    table = evaluate(small_params, small_dataset)
    path = tmp_path / "t.csv"
    text = table.to_csv(path)
    assert EvalTable.from_csv(path) == table == EvalTable.parse_csv(text)
    header = text.splitlines()[0].split(",")
    assert header == ["condition"] + [str(v) for v in table.views] + ["mean"]
    with pytest.raises(ParseError):
        EvalTable.parse_csv("nonsense\n")


@pytest.fixture(scope="module")
def tiny_ablation(small_dataset, small_dims):
    cfg = TrainConfig(model=small_dims, P=3, K=2, total_iters=8, seed=2)
    return cfg, ablation_report(small_dataset, cfg)


def test_ablation_has_four_cells_and_is_deterministic(tiny_ablation, small_dataset):
    cfg, report = tiny_ablation
    assert list(report.tables) == list(ABLATION_CELLS) == ["baseline", "+D", "+G", "++"]
    again = ablation_report(small_dataset, cfg)
    assert again.tables["baseline"] == report.tables["baseline"]
    params, _, _ = train(replace(cfg, use_drpl_bh=True, use_gsam=True), small_dataset)
    assert report.tables["++"] == evaluate(params, small_dataset)
    header = report.to_csv().splitlines()[0]
    assert header == "condition,baseline,+D,+G,++"


def test_ablation_plot_is_byte_identical(tmp_path, tiny_ablation):
    _, report = tiny_ablation
    a = report.plot(tmp_path / "a.svg").read_bytes()
    b = report.plot(tmp_path / "b.svg").read_bytes()
    assert a == b and a.lstrip().startswith(b"<?xml")
