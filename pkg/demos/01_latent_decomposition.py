"""
Splitting a latent code into motion and character
=================================================

A latent sequence r of shape [T', C] is projected onto K orthogonal
directions through its temporal mean. What is explained by those
directions is the static character; the remainder is the motion.
"""
import numpy as np

from via import autodiff as ad
from via import lmd

rng = np.random.default_rng(0)
basis = ad.Tensor(lmd.init_basis(K=4, C=16, rng=rng))
print("orthogonality residual of a fresh basis:", lmd.orthogonality_residual(basis))

# a latent with a known character offset on top of zero-mean motion
motion = rng.normal(size=(8, 16))
motion -= motion.mean(axis=0)
offset = np.array([2.0, -1.0, 0.0, 0.5]) @ basis.data
r = ad.Tensor(motion + offset)

d = lmd.decompose(r, basis)
# magnitudes divide by |d_i|^2, so the basis need not be unit length
print("recovered magnitudes:", np.round(d.magnitudes.data, 4), "(planted 2, -1, 0, 0.5)")

# the motion part keeps no component along the basis once averaged over time
print("max |<mean_t r_m, d_i>|:", np.abs(d.motion.data.mean(axis=0) @ basis.data.T).max())
print("recombination error:", np.abs(lmd.recombine(d.motion, d.character).data - r.data).max())

# zeroing the magnitudes gives the canonical view of this motion
canonical = lmd.manipulate(d.motion, basis, np.zeros(4))
print("canonical code equals the motion part:", np.array_equal(canonical.data, d.motion.data))
