"""Self-supervised pre-training, probe training, and checkpointing."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import lmd
from .encoder import ProbeHead
from .losses import TERMS, LossConfig, forward_pair, loss_total
from .model import ModelConfig, ViAModel
from .sampler import ClusterModel, dataset_descriptors, fit, sample_contrastive
from .skeleton import SkeletonDataset

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step",) + TERMS + ("l_total", "ortho_residual")
# fields that may change between a run and its resumption
_RESUMABLE = ("epochs", "max_steps", "checkpoint_every")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "pretrain"
    epochs: int = 100
    max_steps: int | None = None
    batch_size: int = 8
    lr: float = 1e-3
    # linear ramp of the learning rate over the first steps; 0 keeps it constant
    warmup_steps: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    k_clusters: int = 10
    holdout_per_motion: int = 3
    checkpoint_every: int = 100
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.mode not in ("pretrain", "linear-probe", "fine-tune"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0 or self.k_clusters < 2:
            raise ValueError("epochs, batch_size, k_clusters must be positive and lr >= 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def hash(self) -> str:
        d = self.to_dict()
        for k in _RESUMABLE:
            d.pop(k, None)
        return ckpt.config_hash(d)


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k].astype(p.data.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k, p in self.params.items():
            self.m[k] = tensors[f"adam.m.{k}"].astype(p.data.dtype)
            self.v[k] = tensors[f"adam.v.{k}"].astype(p.data.dtype)


def params_digest(params: dict[str, ad.Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- splits


def heldout_mask(n_motions: int, n_characters: int, per_motion: int) -> np.ndarray:
    """``[M, C]`` mask of cells kept out of pre-training.

    Motion ``m`` drops characters ``(m·per_motion + j) mod C``, so every
    character and every motion keeps training cells.
    """
    mask = np.zeros((n_motions, n_characters), dtype=bool)
    if per_motion <= 0:
        return mask
    if per_motion >= n_characters:
        raise ValueError("cannot hold out every character of a motion")
    for m in range(n_motions):
        for j in range(per_motion):
            mask[m, (m * per_motion + j) % n_characters] = True
    return mask


def train_indices(ds: SkeletonDataset, per_motion: int) -> np.ndarray:
    mask = heldout_mask(ds.n_motions, ds.n_characters, per_motion)
    return np.array([i for i in range(len(ds)) if not mask[ds.motion_ids[i], ds.character_ids[i]]])


# ---------------------------------------------------------------- pre-training


class Trainer:
    def __init__(self, dataset: SkeletonDataset, config: TrainConfig, model: ViAModel | None = None):
        self.dataset = dataset
        self.config = config
        self.train_idx = train_indices(dataset, config.holdout_per_motion)
        centered = dataset.centered()
        if model is None:
            model = ViAModel(config.model, seed=config.seed)
            model.fit_normalizer(centered[self.train_idx])
        self.model = model
        self.frames = model.normalize(centered)
        if len(self.train_idx) < config.batch_size:
            raise ValueError(f"{len(self.train_idx)} training sequences < batch size {config.batch_size}")
        self.clusters: ClusterModel = fit(dataset_descriptors(dataset.frames[self.train_idx]),
                                          config.k_clusters, config.seed)
        self.optimizer = Adam(self.model.params, config.lr, config.betas, config.eps)
        self.step_count = 0
        self.metrics: list[dict] = []
        self._sources_epoch = -1
        self._sources: np.ndarray | None = None

    @property
    def steps_per_epoch(self) -> int:
        return len(self.train_idx) // self.config.batch_size

    @property
    def total_steps(self) -> int:
        if self.config.max_steps is not None:
            return self.config.max_steps
        return self.config.epochs * self.steps_per_epoch

    def _epoch_sources(self, epoch: int) -> np.ndarray:
        # local indices into train_idx; resampled once per epoch
        if epoch != self._sources_epoch:
            rng = np.random.default_rng([self.config.seed, 200, epoch])
            self._sources = np.array([sample_contrastive(i, self.clusters, rng)
                                      for i in range(len(self.train_idx))])
            self._sources_epoch = epoch
        return self._sources

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """Dataset indices of the (driving, source) pairs used at ``step``."""
        spe, B = self.steps_per_epoch, self.config.batch_size
        epoch, j = divmod(step, spe)
        perm = np.random.default_rng([self.config.seed, 100, epoch]).permutation(len(self.train_idx))
        local = perm[j * B:(j + 1) * B]
        src = self._epoch_sources(epoch)[local]
        return self.train_idx[local], self.train_idx[src]

    def cross_targets(self, drive: np.ndarray, source: np.ndarray):
        """Ground-truth swapped sequences plus a mask of the ones that are training cells."""
        ds = self.dataset
        dm, dc = ds.motion_ids[drive], ds.character_ids[drive]
        sm, sc = ds.motion_ids[source], ds.character_ids[source]
        t1 = self.frames[[ds.index(m, c) for m, c in zip(dm, sc)]]
        t2 = self.frames[[ds.index(m, c) for m, c in zip(sm, dc)]]
        held = heldout_mask(ds.n_motions, ds.n_characters, self.config.holdout_per_motion)
        valid = ~np.concatenate([held[dm, sc], held[sm, dc]])
        return t1, t2, valid

    def compute_loss(self, drive: np.ndarray, source: np.ndarray):
        lc = self.config.loss
        state = forward_pair(self.model, self.frames[drive], self.frames[source], cycle=lc.needs_cycle)
        targets = self.cross_targets(drive, source) if lc.use_cross else None
        return loss_total(state, lc, targets)

    def learning_rate(self, step: int) -> float:
        w = self.config.warmup_steps
        if w and step < w:
            return self.config.lr * (step + 1) / w
        return self.config.lr

    def step(self) -> dict:
        drive, source = self.batch(self.step_count)
        total, terms = self.compute_loss(drive, source)
        value = total.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {self.step_count + 1}")
        names = list(self.model.params)
        grads = ad.grad(total, [self.model.params[k] for k in names])
        basis_before = self.model.basis.data.copy()
        self.optimizer.step(dict(zip(names, grads)), self.learning_rate(self.step_count))
        # Gram-Schmidt moves an orthogonal float32 basis by a few ulps, so skip it when untouched
        if not np.array_equal(basis_before, self.model.basis.data):
            lmd.reorthogonalize(self.model.basis)
        self.step_count += 1
        row = {"step": self.step_count, "l_total": value,
               "ortho_residual": lmd.orthogonality_residual(self.model.basis)}
        for k in TERMS + ("l_cross",):
            if k in terms:
                row[k] = terms[k].item()
        self.metrics.append(row)
        return row

    def run(self, n_steps: int | None = None, out_dir=None, log_every: int = 50) -> list[dict]:
        """Train until ``n_steps`` more steps (default: until ``total_steps``)."""
        end = self.total_steps if n_steps is None else self.step_count + n_steps
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        while self.step_count < end:
            try:
                row = self.step()
            except TrainingDiverged:
                if out is not None:
                    # parameters are untouched by the failing step
                    self.save(out / "checkpoint.viac")
                    self.write_metrics(out / "metrics.csv")
                raise
            if log_every and row["step"] % log_every == 0:
                log.info("step %d  total %.5f", row["step"], row["l_total"])
            if out is not None and self.step_count % self.config.checkpoint_every == 0:
                self.save(out / "checkpoint.viac")
                self.write_metrics(out / "metrics.csv")
        if out is not None:
            self.save(out / "checkpoint.viac")
            self.write_metrics(out / "metrics.csv")
        return self.metrics

    def state_tensors(self) -> dict[str, np.ndarray]:
        t = {k: p.data for k, p in self.model.params.items()}
        t.update(self.model.buffers)
        t.update(self.optimizer.state())
        return t

    def save(self, path) -> None:
        ckpt.save(path, self.state_tensors(), self.step_count, self.config.hash(),
                  config=self.config.to_dict())

    def load(self, path) -> None:
        tensors, step, _ = ckpt.load(path, expect_hash=self.config.hash())
        load_params(self.model.params, tensors)
        load_buffers(self.model, tensors)
        self.frames = self.model.normalize(self.dataset.centered())
        self.optimizer.load_state(tensors, step)
        self.step_count = step

    @classmethod
    def resume(cls, path, dataset: SkeletonDataset, config: TrainConfig | None = None) -> "Trainer":
        config = config or TrainConfig.from_dict(ckpt.load_config(path))
        tr = cls(dataset, config)
        tr.load(path)
        return tr

    def write_metrics(self, path) -> None:
        write_metrics(path, self.metrics, self.config.loss.use_cross)


def write_metrics(path, rows: list[dict], cross: bool = False) -> None:
    path = Path(path)
    cols = METRIC_COLUMNS + (("l_cross",) if cross else ())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
    tmp.replace(path)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def load_params(params: dict[str, ad.Tensor], tensors: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        if k not in tensors:
            raise ckpt.CheckpointError(f"checkpoint lacks parameter {k!r}")
        if tensors[k].shape != p.data.shape:
            raise ckpt.CheckpointError(f"{k}: checkpoint shape {tensors[k].shape} vs model {p.data.shape}")
        p.data[...] = tensors[k]


def load_buffers(model: ViAModel, tensors: dict[str, np.ndarray]) -> None:
    for k, b in model.buffers.items():
        if k in tensors:
            b[...] = tensors[k]


def pretrain(dataset: SkeletonDataset, config: TrainConfig, out_dir=None) -> Trainer:
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    tr = Trainer(dataset, config)
    tr.run(out_dir=out_dir)
    return tr


def load_model(path) -> ViAModel:
    """Rebuild a model from a checkpoint and its config sidecar."""
    cfg = TrainConfig.from_dict(ckpt.load_config(path))
    tensors, _, _ = ckpt.load(path)
    model = ViAModel(cfg.model, seed=cfg.seed)
    load_params(model.params, tensors)
    load_buffers(model, tensors)
    return model


# ---------------------------------------------------------------- probes


@dataclass
class ProbeConfig:
    mode: str = "linear"        # linear | finetune
    steps: int = 300
    lr: float = 1e-2
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("linear", "finetune"):
            raise ValueError(f"unknown probe mode {self.mode!r}")


def motion_codes(model: ViAModel, frames: np.ndarray, batch: int = 64) -> np.ndarray:
    """Motion component r_m ``[N, T', C_out]`` of root-centred frames."""
    out = []
    for i in range(0, len(frames), batch):
        x = ad.Tensor(model.normalize(frames[i:i + batch]))
        out.append(model.decompose(model.encode(x), check=False).motion.data)
    return np.concatenate(out).astype(np.float64)


def motion_features(model: ViAModel, frames: np.ndarray, batch: int = 64) -> np.ndarray:
    """Temporal average of the motion component, ``[N, C_out]``."""
    return motion_codes(model, frames, batch).mean(axis=1)


def _probe_logits(model: ViAModel, head: ProbeHead, x: np.ndarray) -> ad.Tensor:
    d = model.decompose(model.encode(ad.Tensor(model.normalize(x))), check=False)
    return head(d.motion)


def train_probe(model: ViAModel, frames: np.ndarray, labels: np.ndarray, n_classes: int,
                config: ProbeConfig) -> ProbeHead:
    """Fit a classifier head on root-centred ``frames``.

    Linear mode leaves every model parameter untouched; fine-tune mode
    updates the encoder and basis too.
    """
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels outside [0, {n_classes})")
    if len(np.unique(labels)) < 2:
        raise ValueError("probe training needs at least two classes present")
    rng = np.random.default_rng([config.seed, 300])
    C = model.config.stage_channels[-1]
    head = ProbeHead(C, n_classes, rng)
    if config.mode == "linear":
        before = params_digest(model.params)
        _fit_linear(head, motion_features(model, frames), labels, config)
        assert params_digest(model.params) == before
        return head
    params = dict(model.encoder.params)
    params["lmd.basis"] = model.basis
    params.update(head.params)
    opt = Adam(params, config.lr * 0.1)
    names = list(params)
    for s in range(config.steps):
        idx = rng.choice(len(frames), size=min(config.batch_size, len(frames)), replace=False)
        loss = ad.cross_entropy(_probe_logits(model, head, frames[idx]), labels[idx])
        grads = ad.grad(loss, [params[k] for k in names])
        opt.step(dict(zip(names, grads)))
        lmd.reorthogonalize(model.basis)
    return head


def _fit_linear(head: ProbeHead, feats: np.ndarray, labels: np.ndarray, config: ProbeConfig) -> None:
    # standardize with training statistics, then fold the affine normalization into the head
    mu = feats.mean(0)
    sd = feats.std(0) + 1e-6
    z = ad.Tensor((feats - mu) / sd)
    opt = Adam(head.params, config.lr)
    names = list(head.params)
    for _ in range(config.steps):
        loss = ad.cross_entropy(head.logits_from_pooled(z), labels)
        grads = ad.grad(loss, [head.params[k] for k in names])
        opt.step(dict(zip(names, grads)))
    w, b = head.params["probe.w"], head.params["probe.b"]
    w_eff = w.data / sd[:, None]
    b.data[...] = b.data - (mu / sd) @ w.data
    w.data[...] = w_eff


def probe_predict(model: ViAModel, head: ProbeHead, frames: np.ndarray) -> np.ndarray:
    feats = motion_features(model, frames)
    return head.logits_from_pooled(ad.Tensor(feats)).data.argmax(-1)


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))
