import csv
import io

import numpy as np
import pytest

from via import evaluation as ev
from via.encoder import ProbeHead
from via.model import ModelConfig, ViAModel
from via.skeleton import generate_dataset
from via.trainer import ProbeConfig, accuracy, heldout_mask, probe_predict


@pytest.fixture(scope="module")
def ds():
    return generate_dataset()


@pytest.fixture(scope="module")
def model(ds):
    m = ViAModel(ModelConfig(), seed=3)
    m.fit_normalizer(ds.centered())
    return m


def _gt(ds, triples):
    x = ds.centered()
    return np.stack([x[ds.index(m, c2)] for m, _, _, c2 in triples])


def test_triples_target_heldout_cells(ds):
    triples = ev.retarget_triples(ds, 3)
    assert len(triples) == 24 * 11
    mask = heldout_mask(8, 12, 3)
    for m, c, m2, c2 in triples:
        assert mask[m, c2] and c != c2 and m2 != m


def test_oracle_generation_scores_zero(ds):
    triples = ev.retarget_triples(ds, 3)
    rep = ev.eval_retargeting(None, ds, generated=_gt(ds, triples))
    assert rep.mean == 0.0
    assert rep.baseline.min() > 0


def test_aggregate_is_mean_of_entries(ds, model):
    rep = ev.eval_retargeting(model, ds)
    assert rep.mean == pytest.approx(rep.mse.mean(), rel=1e-12)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0][-2:] == ["mse", "copy_source_mse"]
    assert len(rows) == len(rep.mse) + 2


def test_retarget_report_deterministic(ds, model):
    a, b = ev.eval_retargeting(model, ds), ev.eval_retargeting(model, ds)
    assert a.mse.tobytes() == b.mse.tobytes()


def test_missing_ground_truth_rejected(ds):
    bare = generate_dataset(n_motions=2, n_characters=2, T=16)
    bare.frames = None
    with pytest.raises(ev.ProtocolError):
        ev.retarget_triples(bare, 1)


# ---------------------------------------------------------------- probes


def test_cv_split_disjoint_and_banded(ds):
    train, test = ev.protocol_split(ds, "cv")
    assert len(train) + len(test) == len(ds)
    assert not set(ds.character_ids[train]) & set(ds.character_ids[test])
    bands = ev.view_bands(ds)
    assert set(bands[ds.character_ids[train]] % 2) == {0}
    assert set(bands[ds.character_ids[test]] % 2) == {1}


def test_cs_split_by_body_scale(ds):
    train, test = ev.protocol_split(ds, "cs")
    size = lambda idx: [np.mean(ds.characters[c].body_scale) for c in set(ds.character_ids[idx])]
    assert max(size(train)) < min(size(test))


def test_overlapping_split_rejected(ds, model):
    idx = np.arange(24)
    with pytest.raises(ev.ProtocolError, match="share"):
        ev.eval_probe(model, ds, split=(idx, idx + 1))


def test_single_class_rejected(model):
    one = generate_dataset(n_motions=2, n_characters=4, T=16)
    one.motion_ids = np.zeros_like(one.motion_ids)
    with pytest.raises(ev.ProtocolError, match="two action classes"):
        ev.eval_probe(model, one, "cv")


def test_unknown_protocol(ds):
    with pytest.raises(ev.ProtocolError):
        ev.protocol_split(ds, "xs")


def test_untrained_probe_sits_at_chance(ds, model):
    _, test = ev.protocol_split(ds, "cv")
    x = ds.centered()
    accs = []
    for seed in range(5):
        head = ProbeHead(64, 8, np.random.default_rng(seed))
        accs.append(accuracy(probe_predict(model, head, x[test]), ds.motion_ids[test]))
    assert abs(np.mean(accs) - 0.125) <= 0.05


def test_shuffled_labels_near_chance(ds, model):
    accs = []
    for seed in range(5):
        labels = np.random.default_rng(seed).permutation(ds.motion_ids)
        accs.append(ev.eval_probe(model, ds, "cv", ProbeConfig(seed=seed), labels=labels).accuracy)
    assert abs(np.mean(accs) - 0.125) <= 0.08


def test_probe_report_fields(ds, model):
    rep = ev.eval_probe(model, ds, "cv", ProbeConfig(steps=50))
    assert 0.0 <= rep.accuracy <= 1.0
    assert all(0.0 <= v <= 1.0 for v in rep.per_class.values())
    # balanced test classes: per-class mean equals overall accuracy
    assert rep.mean_per_class == pytest.approx(rep.accuracy)


# ---------------------------------------------------------------- invariance


def test_identical_sequences_have_unit_similarity(rng):
    f = rng.normal(size=(1, 5))
    sim = ev.cosine_matrix(np.vstack([f, f]))
    assert sim[0, 1] == pytest.approx(1.0)


def test_invariance_pair_counts(ds, model):
    held = ev.heldout_indices(ds, 3)
    inv = ev.motion_invariance(model, ds, held)
    assert len(held) == 24
    assert len(inv.same_motion) >= 200
    assert inv.gap == pytest.approx(inv.median_same - inv.median_cross)


# ---------------------------------------------------------------- export


def test_export_embeddings(ds, model, tmp_path):
    p = ev.export_embeddings(model, ds, tmp_path / "e.csv")
    rows = list(csv.reader(open(p)))
    assert len(rows) - 1 == len(ds)
    header = rows[0]
    assert sum(h.startswith("a_") for h in header) == 32
    assert sum(h.startswith("rm_") for h in header) == 8 * 64
    first = p.read_bytes()
    ev.export_embeddings(model, ds, tmp_path / "e.csv")
    assert p.read_bytes() == first
