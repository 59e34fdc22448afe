"""Self-supervised retargeting objective over a (driving, source) pair batch.

Driving ``p_{m,c}`` supplies the motion, source ``p_{m',c'}`` the character.
The pair forward pass encodes both, swaps characters to generate
``p_{m,c'}`` and ``p_{m',c}``, re-encodes the generated sequences and
recombines the recovered parts to reconstruct the originals.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import lmd
from .autodiff import Tensor

TERMS = ("l_self", "l_cycle", "l_trip_m", "l_trip_c", "l_vel")


@dataclass
class LossConfig:
    margin: float = 1.0
    velocity_weight: float = 1.0
    use_self: bool = True
    use_cycle: bool = True
    use_triplet: bool = True
    use_velocity: bool = True
    # supervised variant: also regress generated sequences onto ground truth
    use_cross: bool = False

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"triplet margin must be > 0, got {self.margin}")
        if self.velocity_weight < 0:
            raise ValueError(f"velocity weight must be >= 0, got {self.velocity_weight}")

    @classmethod
    def ablation(cls, row: str, **kw) -> "LossConfig":
        """Loss toggles of the ablation rows.

        L0 is the supervised retargeting baseline (self plus ground-truth
        cross reconstruction); L1 (+self) .. L4 (+velocity) are the
        self-supervised rows.
        """
        rows = {
            "L0": (True, False, False, False, True),
            "L1": (True, False, False, False, False),
            "L2": (True, True, False, False, False),
            "L3": (True, True, True, False, False),
            "L4": (True, True, True, True, False),
        }
        if row not in rows:
            raise ValueError(f"unknown ablation row {row!r}")
        s, c, t, v, x = rows[row]
        return cls(use_self=s, use_cycle=c, use_triplet=t, use_velocity=v, use_cross=x, **kw)

    def enabled(self) -> list[str]:
        out = []
        if self.use_self:
            out.append("l_self")
        if self.use_cycle:
            out.append("l_cycle")
        if self.use_triplet:
            out += ["l_trip_m", "l_trip_c"]
        if self.use_velocity:
            out.append("l_vel")
        if self.use_cross:
            out.append("l_cross")
        return out

    @property
    def needs_cycle(self) -> bool:
        return self.use_cycle or self.use_triplet or self.use_velocity


@dataclass
class PairForwardState:
    driving: Tensor                       # p_{m,c}     [B, T, V, C]
    source: Tensor                        # p_{m',c'}
    latent_driving: Tensor                # r_{m,c}     [B, T', C_out]
    latent_source: Tensor                 # r_{m',c'}
    dec_driving: lmd.Decomposition        # r_m, r_c
    dec_source: lmd.Decomposition         # r_{m'}, r_{c'}
    self_driving: Tensor                  # D(r_m, r_c)
    self_source: Tensor                   # D(r_{m'}, r_{c'})
    gen_driving_motion: Tensor            # p_{m,c'} = D(r_m, r_{c'})
    gen_source_motion: Tensor             # p_{m',c} = D(r_{m'}, r_c)
    # filled by the cycle pass
    cyc_driving_motion: lmd.Decomposition | None = None   # from E(p_{m,c'}): r̂_m, r̂_{c'}
    cyc_source_motion: lmd.Decomposition | None = None    # from E(p_{m',c}): r̂_{m'}, r̂_c
    cycle_driving: Tensor | None = None   # D(r̂_m, r̂_c)
    cycle_source: Tensor | None = None    # D(r̂_{m'}, r̂_{c'})


def forward_pair(model, driving, source, cycle: bool = True) -> PairForwardState:
    """Run encode → decompose → swap → decode (→ re-encode → decode) on a batch of pairs."""
    p1, p2 = ad.as_tensor(driving), ad.as_tensor(source)
    if p1.shape != p2.shape:
        raise ad.ShapeError(f"driving {p1.shape} and source {p2.shape} batches differ")
    B = p1.shape[0]
    lmd.check_basis(model.basis)
    r = model.encode(ad.concat([p1, p2], axis=0))
    dec = model.decompose(r, check=False)
    r1, r2 = r[:B], r[B:]
    rm1, rm2 = dec.motion[:B], dec.motion[B:]
    rc1, rc2 = dec.character[:B], dec.character[B:]
    d1 = lmd.Decomposition(dec.magnitudes[:B], rc1, rm1)
    d2 = lmd.Decomposition(dec.magnitudes[B:], rc2, rm2)
    motions = ad.concat([rm1, rm2, rm1, rm2], axis=0)
    chars = ad.concat([rc1, rc2, rc2, rc1], axis=0)
    out = model.decode(lmd.recombine(motions, chars))
    state = PairForwardState(p1, p2, r1, r2, d1, d2,
                             out[:B], out[B:2 * B], out[2 * B:3 * B], out[3 * B:])
    if not cycle:
        return state
    # re-encode the generated sequences; nothing is reused from the first pass
    rh = model.encode(ad.concat([state.gen_driving_motion, state.gen_source_motion], axis=0))
    dh = model.decompose(rh, check=False)
    state.cyc_driving_motion = lmd.Decomposition(dh.magnitudes[:B], dh.character[:B], dh.motion[:B])
    state.cyc_source_motion = lmd.Decomposition(dh.magnitudes[B:], dh.character[B:], dh.motion[B:])
    hat_m, hat_c_src = dh.motion[:B], dh.character[:B]     # r̂_m, r̂_{c'}
    hat_m_src, hat_c = dh.motion[B:], dh.character[B:]     # r̂_{m'}, r̂_c
    cyc = model.decode(lmd.recombine(ad.concat([hat_m, hat_m_src], axis=0),
                                     ad.concat([hat_c, hat_c_src], axis=0)))
    state.cycle_driving, state.cycle_source = cyc[:B], cyc[B:]
    return state


# ---------------------------------------------------------------- primitives


def mse(pred, target) -> Tensor:
    """Mean over all entries of the squared difference."""
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    return ad.mean(ad.square(pred - target))


def triplet(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float) -> Tensor:
    """mean_b max(0, |anchor - positive| - |anchor - negative| + margin).

    Norms run over every non-batch axis (Frobenius for motion tensors).
    """
    axes = tuple(range(1, anchor.ndim))
    pos = ad.norm(anchor - positive, axis=axes)
    neg = ad.norm(anchor - negative, axis=axes)
    return ad.mean(ad.hinge(ad.add_scalar(pos - neg, margin)))


def velocity(seq: Tensor) -> Tensor:
    """Frame-to-frame joint displacements ``[B, T-1, V, C]``."""
    if seq.shape[1] < 2:
        raise ValueError("velocity needs at least 2 frames")
    return seq[:, 1:] - seq[:, :-1]


def velocity_loss(recon, target, weight: float = 1.0) -> Tensor:
    """weight · mean_b sum_{joints} |V_n(recon) - V_n(target)|²."""
    recon, target = ad.as_tensor(recon), ad.as_tensor(target)
    if recon.ndim == 3:
        recon = ad.reshape(recon, (1,) + recon.shape)
        target = ad.reshape(target, (1,) + target.shape)
    diff = velocity(recon) - velocity(target)
    per_seq = ad.sum(ad.square(diff), axis=(1, 2, 3))
    return ad.scale(ad.mean(per_seq), weight)


# ---------------------------------------------------------------- terms


def _both(a: Tensor, b: Tensor) -> Tensor:
    return ad.concat([a, b], axis=0)


def loss_self(state: PairForwardState) -> Tensor:
    return mse(_both(state.self_driving, state.self_source), _both(state.driving, state.source))


def loss_cycle(state: PairForwardState) -> Tensor:
    return mse(_both(state.cycle_driving, state.cycle_source), _both(state.driving, state.source))


def loss_triplet_motion(state: PairForwardState, margin: float = 1.0) -> Tensor:
    hat_m = state.cyc_driving_motion.motion
    return triplet(hat_m, state.dec_driving.motion, state.dec_source.motion, margin)


def loss_triplet_character(state: PairForwardState, margin: float = 1.0) -> Tensor:
    hat_c = state.cyc_source_motion.character
    return triplet(hat_c, state.dec_driving.character, state.dec_source.character, margin)


def loss_velocity(state: PairForwardState, weight: float = 1.0) -> Tensor:
    return velocity_loss(state.cycle_driving, state.driving, weight)


def loss_cross(state: PairForwardState, target_driving_motion, target_source_motion,
               valid=None) -> Tensor:
    """Supervised cross reconstruction against ground-truth ``p_{m,c'}`` and ``p_{m',c}``.

    ``valid`` (length 2B, driving-motion rows first) drops generated
    sequences whose target cell must stay unseen.
    """
    pred = _both(state.gen_driving_motion, state.gen_source_motion)
    target = _both(ad.as_tensor(target_driving_motion), ad.as_tensor(target_source_motion))
    if valid is not None:
        keep = np.flatnonzero(valid)
        if not keep.size:
            return ad.scale(ad.sum(pred), 0.0)
        pred, target = ad.getitem(pred, keep), ad.getitem(target, keep)
    return mse(pred, target)


def loss_terms(state: PairForwardState, config: LossConfig, cross_targets=None) -> dict[str, Tensor]:
    """Every enabled term, keyed by its metrics column name."""
    enabled = config.enabled()
    terms: dict[str, Tensor] = {}
    if "l_self" in enabled:
        terms["l_self"] = loss_self(state)
    if "l_cycle" in enabled:
        terms["l_cycle"] = loss_cycle(state)
    if "l_trip_m" in enabled:
        terms["l_trip_m"] = loss_triplet_motion(state, config.margin)
        terms["l_trip_c"] = loss_triplet_character(state, config.margin)
    if "l_vel" in enabled:
        terms["l_vel"] = loss_velocity(state, config.velocity_weight)
    if "l_cross" in enabled:
        if cross_targets is None:
            raise ValueError("supervised cross reconstruction needs ground-truth targets")
        terms["l_cross"] = loss_cross(state, *cross_targets)
    return terms


def loss_total(state: PairForwardState, config: LossConfig, cross_targets=None):
    """Sum of the enabled terms; returns ``(total, terms)``."""
    terms = loss_terms(state, config, cross_targets)
    if not terms:
        raise ValueError("at least one loss term must be enabled")
    total = None
    for t in terms.values():
        total = t if total is None else total + t
    return total, terms
