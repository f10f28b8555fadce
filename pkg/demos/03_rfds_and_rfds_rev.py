# %% [markdown]
# # Distillation on an exact oracle: RFDS and RFDS-Rev
#
# The "generator" here is the identity, so each run optimizes one 2D point
# against the exact velocity field of a mixture. Every run in a batch shares
# network calls, which the pass counters make visible.

# %%
import numpy as np

from rflab import DistillConfig, GaussianMixture, IdentityGenerator, MixtureVelocityField, Schedule
from rflab import rfds_optimize, rfds_rev_optimize
from rflab.metrics import mode_distances

rf = Schedule()
two = GaussianMixture.isotropic([[2.0, 0.0], [-2.0, 0.0]], 0.2)
field = MixtureVelocityField(two, rf)
gen = IdentityGenerator(2)

# %% [markdown]
# From random starts both methods settle near the modes.

# %%
init = np.random.default_rng(0).normal(0, 3, (50, 2))
for name, loop in (("RFDS", rfds_optimize), ("RFDS-Rev", rfds_rev_optimize)):
    theta, rec = loop(field, rf, gen, init, None, DistillConfig(max_iters=1000))
    d, _ = mode_distances(theta, two.means)
    print(f"{name:9s} within 3 sigma: {np.mean(d < 0.6):.0%}  passes/iter {rec.summary['forwards_per_iter']:g} fwd")

# %% [markdown]
# Started exactly between the modes, RFDS breaks the symmetry through its
# fresh noise. RFDS-Rev first inverts each rendered point back to the noise
# that produces it. The midpoint's preimage sits on the boundary between the
# two basins, so the symmetry is never broken and the runs stay put.

# %%
for name, loop in (("RFDS", rfds_optimize), ("RFDS-Rev", rfds_rev_optimize)):
    theta, rec = loop(field, rf, gen, np.zeros((50, 2)), None, DistillConfig(max_iters=1000))
    d, _ = mode_distances(theta, two.means)
    print(f"{name:9s} from midpoint, within 3 sigma: {np.mean(d < 0.6):.0%}  "
          f"terminal residual {rec.summary['terminal_residual']:.3f}")

# %% [markdown]
# With strong guidance the fixed point of RFDS moves past the mode along the
# guidance direction: the over-saturation known from score distillation.

# %%
ring = GaussianMixture.isotropic(4 * np.stack([np.cos(np.arange(8) * np.pi / 4), np.sin(np.arange(8) * np.pi / 4)], 1), 0.2)
rfield = MixtureVelocityField(ring, rf)
labels = np.arange(8)
for scale in (1.0, 7.5, 50.0):
    theta, _ = rfds_optimize(rfield, rf, gen, np.zeros((8, 2)), labels, DistillConfig(cfg_scale=scale, max_iters=3000))
    print(f"CFG {scale:4g}: final radius {np.linalg.norm(theta, axis=1).mean():.2f} (modes at radius 4)")
