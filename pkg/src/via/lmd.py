"""Latent motion disentanglement.

A latent code ``r[T', C]`` is split into a temporally static character part
``r_c`` lying in the span of an orthogonal basis ``D[K, C]`` and a motion
residual ``r_m[t] = r[t] - r_c``. The magnitudes are projections of the
temporal mean of ``r`` onto each basis vector, ``a_i = <r̄, d_i> / |d_i|²``.

All functions accept a single latent ``[T', C]`` or a batch ``[B, T', C]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-6
PIVOT_TOL = 1e-8


class BasisError(ValueError):
    pass


@dataclass
class Decomposition:
    magnitudes: Tensor   # [B, K]
    character: Tensor    # [B, C]
    motion: Tensor       # [B, T', C]


def orthogonality_residual(basis) -> float:
    """max_{i != j} |<d_i, d_j>| / (|d_i| |d_j|)."""
    d = np.asarray(basis.data if isinstance(basis, Tensor) else basis, dtype=np.float64)
    if len(d) < 2:
        return 0.0
    n = np.linalg.norm(d, axis=1)
    g = np.abs(d @ d.T) / np.outer(n, n)
    np.fill_diagonal(g, 0.0)
    return float(g.max())


def check_basis(basis, tol: float = ORTHO_TOL) -> None:
    d = basis.data if isinstance(basis, Tensor) else np.asarray(basis)
    if d.ndim != 2 or not 1 <= d.shape[0] < d.shape[1]:
        raise BasisError(f"basis must be [K, C] with 1 <= K < C, got {d.shape}")
    norms = np.linalg.norm(d, axis=1)
    if norms.min() < PIVOT_TOL:
        raise BasisError(f"basis vector {int(norms.argmin())} has norm {norms.min():.3g}")
    res = orthogonality_residual(d)
    if res > tol:
        raise BasisError(f"basis not orthogonal: residual {res:.3g} > {tol:g}")


def _batched(r: Tensor):
    if r.ndim == 2:
        return ad.reshape(r, (1,) + r.shape), True
    return r, False


def character_from_magnitudes(magnitudes: Tensor, basis: Tensor) -> Tensor:
    """r_c = sum_i a_i d_i, for magnitudes ``[B, K]``."""
    return ad.matmul(magnitudes, basis)


def decompose(r, basis: Tensor, check: bool = True) -> Decomposition:
    r = ad.as_tensor(r)
    if check:
        check_basis(basis)
    rb, single = _batched(r)
    B, T, C = rb.shape
    K = basis.shape[0]
    if basis.shape[1] != C:
        raise ad.ShapeError(f"decompose: latent {r.shape} vs basis {basis.shape}")
    mean_r = ad.mean(rb, axis=1)                                  # [B, C]
    proj = ad.matmul(mean_r, ad.transpose(basis, (1, 0)))        # [B, K]
    sq = ad.reshape(ad.sum(ad.square(basis), axis=1), (1, K))
    mags = ad.div(proj, ad.broadcast_to(sq, (B, K)))
    rc = character_from_magnitudes(mags, basis)                  # [B, C]
    rm = rb - ad.broadcast_to(ad.reshape(rc, (B, 1, C)), (B, T, C))
    if single:
        return Decomposition(mags[0], rc[0], rm[0])
    return Decomposition(mags, rc, rm)


def recombine(motion, character) -> Tensor:
    """output[t] = r_m[t] + r_c."""
    motion, character = ad.as_tensor(motion), ad.as_tensor(character)
    if motion.ndim == 2:
        T, C = motion.shape
        if character.shape != (C,):
            raise ad.ShapeError(f"recombine: motion {motion.shape} vs character {character.shape}")
        return motion + ad.broadcast_to(ad.reshape(character, (1, C)), (T, C))
    B, T, C = motion.shape
    if character.shape != (B, C):
        raise ad.ShapeError(f"recombine: motion {motion.shape} vs character {character.shape}")
    return motion + ad.broadcast_to(ad.reshape(character, (B, 1, C)), (B, T, C))


def manipulate(motion, basis: Tensor, magnitudes) -> Tensor:
    """Recombine a motion with the character built from chosen magnitudes."""
    motion = ad.as_tensor(motion)
    mags = ad.as_tensor(magnitudes)
    if mags.ndim == 1:
        rc = ad.matmul(ad.reshape(mags, (1, -1)), basis)
        rc = rc[0] if motion.ndim == 2 else ad.broadcast_to(rc, (motion.shape[0], basis.shape[1]))
    else:
        rc = character_from_magnitudes(mags, basis)
    return recombine(motion, rc)


def gram_schmidt(d: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Classical Gram-Schmidt on the rows, in index order, without normalizing.

    Rows whose orthogonal remainder falls below the pivot tolerance are
    replaced by a random direction orthogonal to the earlier rows.
    """
    d = np.array(d, dtype=np.float64)
    out = np.empty_like(d)
    for i in range(len(d)):
        v = d[i].copy()
        # two passes keep the residual at round-off level
        for _ in range(2):
            for j in range(i):
                v -= (v @ out[j]) / (out[j] @ out[j]) * out[j]
        if np.linalg.norm(v) < PIVOT_TOL:
            log.warning("basis vector %d is degenerate; reinitializing", i)
            rng = rng or np.random.default_rng(i)
            v = rng.normal(size=d.shape[1])
            for _ in range(2):
                for j in range(i):
                    v -= (v @ out[j]) / (out[j] @ out[j]) * out[j]
            v /= np.linalg.norm(v)
        out[i] = v
    return out


def reorthogonalize(basis, rng: np.random.Generator | None = None):
    """Gram-Schmidt in place on a basis tensor (or on a copy of an array)."""
    if isinstance(basis, Tensor):
        basis.data[...] = gram_schmidt(basis.data, rng).astype(basis.data.dtype)
        return basis
    return gram_schmidt(basis, rng)


def init_basis(K: int, C: int, rng: np.random.Generator) -> np.ndarray:
    if not 1 <= K < C:
        raise ValueError(f"need 1 <= K < C_out, got K={K}, C_out={C}")
    return gram_schmidt(rng.normal(0.0, 1.0 / np.sqrt(C), (K, C)))
