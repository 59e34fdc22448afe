import csv

import numpy as np
import pytest

from via import checkpoint as ckpt
from via import lmd
from via.losses import LossConfig
from via.model import ModelConfig
from via.skeleton import generate_dataset
from via.trainer import (METRIC_COLUMNS, ProbeConfig, TrainConfig, Trainer, TrainingDiverged,
                         heldout_mask, load_model, params_digest, train_indices, train_probe)

SMALL = ModelConfig(stage_channels=(4, 6, 8), decoder_channels=(8, 6), K=4)


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(n_motions=4, n_characters=6, T=16, seed=3)


def _cfg(**kw):
    base = dict(max_steps=6, batch_size=4, k_clusters=3, holdout_per_motion=1, model=SMALL,
                checkpoint_every=3, lr=3e-3, loss=LossConfig(velocity_weight=0.05))
    base.update(kw)
    return TrainConfig(**base)


def _state(tr):
    return {k: p.data.copy() for k, p in tr.model.params.items()}


def test_heldout_mask_layout():
    mask = heldout_mask(8, 12, 3)
    assert mask.sum() == 24
    assert mask.sum(1).tolist() == [3] * 8
    assert mask[0, :3].all() and mask[1, 3:6].all() and mask[4, [0, 1, 2]].all()
    assert (~mask).sum(0).min() > 0


def test_heldout_rejects_everything():
    with pytest.raises(ValueError):
        heldout_mask(2, 3, 3)


def test_zero_learning_rate_keeps_parameters(small_ds):
    tr = Trainer(small_ds, _cfg(lr=0.0))
    before = _state(tr)
    tr.step()
    for k, v in before.items():
        assert tr.model.params[k].data.tobytes() == v.tobytes(), k


def test_basis_orthogonal_after_every_step(small_ds):
    tr = Trainer(small_ds, _cfg(lr=5e-2))
    for _ in range(4):
        row = tr.step()
        assert row["ortho_residual"] <= lmd.ORTHO_TOL
        lmd.check_basis(tr.model.basis)


def test_metrics_csv_rows(small_ds, tmp_path):
    tr = Trainer(small_ds, _cfg())
    tr.run(out_dir=tmp_path)
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert len(rows) - 1 == 6
    assert all(r[1] != "" for r in rows[1:])


def test_disabled_terms_leave_blank_columns(small_ds, tmp_path):
    tr = Trainer(small_ds, _cfg(loss=LossConfig.ablation("L1"), max_steps=2))
    tr.run(out_dir=tmp_path)
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["l_self"] != "" and rows[0]["l_cycle"] == ""


def test_resume_is_bit_exact(small_ds, tmp_path):
    full = Trainer(small_ds, _cfg(max_steps=8))
    full.run()
    part = Trainer(small_ds, _cfg(max_steps=8))
    part.run(5, out_dir=tmp_path)
    resumed = Trainer.resume(tmp_path / "checkpoint.viac", small_ds, _cfg(max_steps=8))
    assert resumed.step_count == 5
    resumed.run()
    for k, p in full.model.params.items():
        assert resumed.model.params[k].data.tobytes() == p.data.tobytes(), k
    assert [r["l_total"] for r in resumed.metrics] == [r["l_total"] for r in full.metrics[5:]]


def test_resume_with_other_config_rejected(small_ds, tmp_path):
    Trainer(small_ds, _cfg()).run(2, out_dir=tmp_path)
    with pytest.raises(ckpt.ConfigMismatchError):
        Trainer.resume(tmp_path / "checkpoint.viac", small_ds, _cfg(lr=1e-2))


def test_checkpoint_round_trip_is_bit_exact(small_ds, tmp_path):
    tr = Trainer(small_ds, _cfg())
    tr.run(3)
    tr.save(tmp_path / "c.viac")
    tensors, step, h = ckpt.load(tmp_path / "c.viac")
    assert step == 3 and h == tr.config.hash()
    for k, v in tr.state_tensors().items():
        assert tensors[k].tobytes() == np.asarray(v, dtype=np.float32).tobytes(), k
    model = load_model(tmp_path / "c.viac")
    assert params_digest(model.params) == params_digest(tr.model.params)


def test_divergence_keeps_last_good_checkpoint(small_ds, tmp_path):
    tr = Trainer(small_ds, _cfg())
    tr.run(2)
    good = _state(tr)
    tr.frames = tr.frames.copy()
    tr.frames[:] = np.nan
    with pytest.raises(TrainingDiverged, match="step 3"):
        tr.run(out_dir=tmp_path)
    tensors, step, _ = ckpt.load(tmp_path / "checkpoint.viac")
    assert step == 2
    for k, v in good.items():
        assert tensors[k].tobytes() == v.tobytes()


def test_batches_avoid_driving_cluster(small_ds):
    tr = Trainer(small_ds, _cfg())
    local = {g: i for i, g in enumerate(tr.train_idx)}
    for s in range(10):
        drive, source = tr.batch(s)
        for d, c in zip(drive, source):
            assert tr.clusters.assignments[local[d]] != tr.clusters.assignments[local[c]]


def test_training_skips_heldout_cells(small_ds):
    tr = Trainer(small_ds, _cfg())
    held = set(range(len(small_ds))) - set(train_indices(small_ds, 1).tolist())
    for s in range(12):
        drive, source = tr.batch(s)
        assert not held & set(drive.tolist()) and not held & set(source.tolist())


def test_supervised_targets_skip_heldout_cells(small_ds):
    tr = Trainer(small_ds, _cfg(loss=LossConfig.ablation("L0")))
    held = heldout_mask(4, 6, 1)
    ds = small_ds
    dropped = 0
    for s in range(12):
        drive, source = tr.batch(s)
        t1, t2, valid = tr.cross_targets(drive, source)
        cells = [(m, c) for m, c in zip(ds.motion_ids[drive], ds.character_ids[source])]
        cells += [(m, c) for m, c in zip(ds.motion_ids[source], ds.character_ids[drive])]
        assert [not held[m, c] for m, c in cells] == valid.tolist()
        dropped += int((~valid).sum())
        np.testing.assert_array_equal(t1[0], tr.frames[ds.index(*cells[0])])
    assert dropped > 0


def test_supervised_step_logs_cross_term(small_ds, tmp_path):
    tr = Trainer(small_ds, _cfg(loss=LossConfig.ablation("L0"), max_steps=2))
    tr.run(out_dir=tmp_path)
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["l_cross"] != "" and rows[0]["l_cycle"] == ""


def test_passed_model_keeps_its_normalizer(small_ds):
    first = Trainer(small_ds, _cfg())
    first.model.buffers["norm.scale"][:] = 2.0
    second = Trainer(small_ds, _cfg(loss=LossConfig.ablation("L1")), model=first.model)
    assert second.model.buffers["norm.scale"][0] == 2.0


@pytest.mark.parametrize("kw", [dict(mode="sideways"), dict(batch_size=0), dict(lr=-1.0),
                                dict(k_clusters=1), dict(warmup_steps=-2)])
def test_invalid_train_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_train_config_round_trip():
    cfg = _cfg(warmup_steps=10)
    back = TrainConfig.from_dict(cfg.to_dict())
    assert back == cfg and back.hash() == cfg.hash()
    assert _cfg(max_steps=99, warmup_steps=10).hash() == cfg.hash()
    assert _cfg().hash() != cfg.hash()


def test_warmup_ramps_learning_rate(small_ds):
    tr = Trainer(small_ds, _cfg(warmup_steps=4, lr=1.0))
    assert [tr.learning_rate(s) for s in range(6)] == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]


# ---------------------------------------------------------------- probes


def test_linear_probe_leaves_encoder_untouched(small_ds):
    tr = Trainer(small_ds, _cfg())
    before = params_digest(tr.model.params)
    train_probe(tr.model, small_ds.centered(), small_ds.motion_ids, 4, ProbeConfig(steps=20))
    assert params_digest(tr.model.params) == before


def test_finetune_changes_encoder(small_ds):
    tr = Trainer(small_ds, _cfg())
    before = params_digest(tr.model.encoder_params())
    train_probe(tr.model, small_ds.centered(), small_ds.motion_ids, 4, ProbeConfig(mode="finetune", steps=2))
    assert params_digest(tr.model.encoder_params()) != before


def test_probe_label_range_checked(small_ds):
    tr = Trainer(small_ds, _cfg())
    with pytest.raises(ValueError):
        train_probe(tr.model, small_ds.centered(), small_ds.motion_ids + 1, 4, ProbeConfig(steps=1))
