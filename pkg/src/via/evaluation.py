"""Retargeting error, cross-view probing, motion-invariance statistics, embedding export."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import lmd
from .model import ViAModel
from .skeleton import SkeletonDataset
from .trainer import (ProbeConfig, accuracy, heldout_mask, motion_codes, probe_predict,
                      train_probe)


class ProtocolError(ValueError):
    pass


# ---------------------------------------------------------------- retargeting


@dataclass
class RetargetReport:
    triples: list[tuple[int, int, int, int]]   # (motion, character, source motion, target character)
    mse: np.ndarray
    baseline: np.ndarray                        # copy-source

    @property
    def mean(self) -> float:
        return float(self.mse.mean())

    @property
    def baseline_mean(self) -> float:
        return float(self.baseline.mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["motion", "character", "source_motion", "target_character", "mse", "copy_source_mse"])
        for (m, c, m2, c2), e, b in zip(self.triples, self.mse, self.baseline):
            w.writerow([m, c, m2, c2, repr(float(e)), repr(float(b))])
        w.writerow(["mean", "", "", "", repr(self.mean), repr(self.baseline_mean)])
        return buf.getvalue()


def retarget_triples(ds: SkeletonDataset, holdout_per_motion: int, seed: int = 0):
    """(m, c, m', c') with target cell (m, c') held out of training and c != c'."""
    if ds.frames is None or ds.n_characters < 2:
        raise ProtocolError("dataset lacks ground-truth cross pairs")
    mask = heldout_mask(ds.n_motions, ds.n_characters, holdout_per_motion)
    if not mask.any():
        mask = np.ones_like(mask)
    rng = np.random.default_rng([seed, 400])
    triples = []
    for m, c2 in zip(*np.nonzero(mask)):
        for c in range(ds.n_characters):
            if c == c2:
                continue
            m2 = int(rng.choice([k for k in range(ds.n_motions) if k != m]))
            triples.append((int(m), c, m2, int(c2)))
    return triples


def eval_retargeting(model: ViAModel, ds: SkeletonDataset, holdout_per_motion: int = 3,
                     seed: int = 0, generated: np.ndarray | None = None) -> RetargetReport:
    """Per-triple MSE of D(r_m of p_{m,c} + r_c of p_{m',c'}) against ground truth p_{m,c'}.

    ``generated`` substitutes precomputed outputs (one per triple).
    """
    x = ds.centered()
    triples = retarget_triples(ds, holdout_per_motion, seed)
    drive = np.array([ds.index(m, c) for m, c, _, _ in triples])
    source = np.array([ds.index(m2, c2) for _, _, m2, c2 in triples])
    target = np.array([ds.index(m, c2) for m, _, _, c2 in triples])
    if generated is None:
        out = []
        for i in range(0, len(triples), 64):
            sl = slice(i, i + 64)
            out.append(model.retarget(x[drive[sl]], x[source[sl]]))
        generated = np.concatenate(out)
    gt = x[target].astype(np.float64)
    mse = ((np.asarray(generated, dtype=np.float64) - gt) ** 2).mean(axis=(1, 2, 3))
    base = ((x[source].astype(np.float64) - gt) ** 2).mean(axis=(1, 2, 3))
    return RetargetReport(triples, mse, base)


# ---------------------------------------------------------------- probes


@dataclass
class ProbeReport:
    protocol: str
    accuracy: float
    per_class: dict[int, float]
    train_indices: np.ndarray = field(repr=False)
    test_indices: np.ndarray = field(repr=False)

    @property
    def mean_per_class(self) -> float:
        return float(np.mean(list(self.per_class.values())))


def view_bands(ds: SkeletonDataset, n_bands: int = 6) -> np.ndarray:
    """Band index of each character's view angle over the observed range."""
    yaw = np.array([c.view_angle for c in ds.characters])
    edges = np.linspace(yaw.min(), yaw.max(), n_bands + 1)
    return np.clip(np.searchsorted(edges, yaw, side="right") - 1, 0, n_bands - 1)


def protocol_split(ds: SkeletonDataset, protocol: str = "cv", n_bands: int = 6):
    """Train/test sequence indices with disjoint characters.

    ``cv``: characters in even view bands train, odd bands test.
    ``cs``: characters below the median mean body scale train, the rest test.
    """
    if protocol == "cv":
        train_chars = np.flatnonzero(view_bands(ds, n_bands) % 2 == 0)
    elif protocol == "cs":
        size = np.array([np.mean(c.body_scale) for c in ds.characters])
        train_chars = np.argsort(size)[:len(size) // 2]
    else:
        raise ProtocolError(f"unknown protocol {protocol!r}")
    is_train = np.isin(ds.character_ids, train_chars)
    return np.flatnonzero(is_train), np.flatnonzero(~is_train)


def check_split(ds: SkeletonDataset, train: np.ndarray, test: np.ndarray) -> None:
    if np.intersect1d(ds.character_ids[train], ds.character_ids[test]).size:
        raise ProtocolError("train and test splits share characters")
    if len(np.unique(ds.motion_ids)) < 2:
        raise ProtocolError("probing needs at least two action classes")
    if len(train) == 0 or len(test) == 0:
        raise ProtocolError("empty split")


def eval_probe(model: ViAModel, ds: SkeletonDataset, protocol: str = "cv",
               config: ProbeConfig | None = None, labels: np.ndarray | None = None,
               split=None) -> ProbeReport:
    """Train a probe on one character set, report top-1 on the held-out set."""
    config = config or ProbeConfig()
    train, test = split if split is not None else protocol_split(ds, protocol)
    check_split(ds, train, test)
    labels = ds.motion_ids if labels is None else np.asarray(labels)
    n_classes = int(ds.motion_ids.max()) + 1
    x = ds.centered()
    head = train_probe(model, x[train], labels[train], n_classes, config)
    pred = probe_predict(model, head, x[test])
    per_class = {int(k): accuracy(pred[labels[test] == k], labels[test][labels[test] == k])
                 for k in np.unique(labels[test])}
    return ProbeReport(protocol, accuracy(pred, labels[test]), per_class, train, test)


# ---------------------------------------------------------------- invariance


@dataclass
class InvarianceStats:
    same_motion: np.ndarray
    cross_motion: np.ndarray

    @property
    def median_same(self) -> float:
        return float(np.median(self.same_motion))

    @property
    def median_cross(self) -> float:
        return float(np.median(self.cross_motion))

    @property
    def gap(self) -> float:
        return self.median_same - self.median_cross


def cosine_matrix(feats: np.ndarray) -> np.ndarray:
    f = np.asarray(feats, dtype=np.float64)
    n = np.linalg.norm(f, axis=1, keepdims=True)
    f = f / np.where(n > 0, n, 1.0)
    return f @ f.T


def motion_invariance(model: ViAModel, ds: SkeletonDataset, indices=None) -> InvarianceStats:
    """Cosine similarity of flattened motion codes over pairs involving ``indices``.

    Pairs are (same motion, different character) versus (different motion);
    each unordered pair counts once.
    """
    x = ds.centered()
    sim = cosine_matrix(motion_codes(model, x).reshape(len(ds), -1))
    focus = np.zeros(len(ds), dtype=bool)
    focus[np.arange(len(ds)) if indices is None else np.asarray(indices)] = True
    i, j = np.triu_indices(len(ds), k=1)
    keep = focus[i] | focus[j]
    i, j = i[keep], j[keep]
    same_m = ds.motion_ids[i] == ds.motion_ids[j]
    diff_c = ds.character_ids[i] != ds.character_ids[j]
    return InvarianceStats(sim[i, j][same_m & diff_c], sim[i, j][~same_m])


def heldout_indices(ds: SkeletonDataset, holdout_per_motion: int) -> np.ndarray:
    mask = heldout_mask(ds.n_motions, ds.n_characters, holdout_per_motion)
    return np.array([i for i in range(len(ds)) if mask[ds.motion_ids[i], ds.character_ids[i]]])


# ---------------------------------------------------------------- export


def embeddings_csv(model: ViAModel, ds: SkeletonDataset) -> str:
    """One row per sequence: id, motion, character, flattened r_m, magnitudes."""
    d = model.decompose(model.encode(ad.Tensor(model.normalize(ds.centered()))), check=False)
    rm = d.motion.data.reshape(len(ds), -1)
    mags = d.magnitudes.data
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sequence_id", "motion_id", "character_id"]
               + [f"rm_{k}" for k in range(rm.shape[1])] + [f"a_{k}" for k in range(mags.shape[1])])
    for n in range(len(ds)):
        w.writerow([n, int(ds.motion_ids[n]), int(ds.character_ids[n])]
                   + [repr(float(v)) for v in rm[n]] + [repr(float(v)) for v in mags[n]])
    return buf.getvalue()


def export_embeddings(model: ViAModel, ds: SkeletonDataset, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(embeddings_csv(model, ds))
    tmp.replace(path)
    return path
