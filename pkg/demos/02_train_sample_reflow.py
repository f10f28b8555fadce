# %% [markdown]
# # Training a velocity net on the 8-Gaussian ring, then straightening it
#
# Set ``STEPS`` to 20000 for the full-size run (about a minute per 10k
# steps on one core). The default keeps the demo short.

# %%
import os
from pathlib import Path

import numpy as np

from rflab import NetConfig, Schedule, TrainConfig, reflow_finetune, train_flow_matching
from rflab.datasets import Dataset, DatasetKind, sample_dataset
from rflab.metrics import energy_permutation_test
from rflab.plots import scatter_svg, trajectories_svg
from rflab.sampler import SamplerConfig, euler_invert, euler_sample, straightness

STEPS = int(os.environ.get("DEMO_STEPS", 4000))
out = Path(os.environ.get("RFLAB_RUN_ROOT", "runs")) / "demo-train"
out.mkdir(parents=True, exist_ok=True)
rf = Schedule()
ring = Dataset(DatasetKind.RING8)

# %%
net = train_flow_matching(rf, ring, TrainConfig(steps=STEPS, log_every=0), arch=NetConfig(), n_labels=ring.n_labels)
print("final loss (mean of last 100 steps):", net.loss_history[-100:].mean())

# %% [markdown]
# Sample with random labels and compare against held-out data.

# %%
rng = np.random.default_rng(1)
eps, labels = rng.standard_normal((2000, 2)), rng.integers(0, 8, 2000)
x, traj = euler_sample(net, rf, eps, SamplerConfig(steps=50, keep_trajectory=True), labels)
held, _ = sample_dataset(ring, 2000, stream=1)
res = energy_permutation_test(x, held)
print(f"energy distance {res.statistic:.4f}, permutation 95% threshold {res.threshold:.4f}")
scatter_svg(out / "samples.svg", x, held, "50-step samples")
trajectories_svg(out / "trajectories_base.svg", traj.states[:, :64], held, "before Reflow")

# %% [markdown]
# Reflow: regenerate (noise, sample) pairs with the net itself and fine-tune
# on them. Trajectories straighten and Euler inversion becomes accurate.

# %%
tuned = reflow_finetune(net, rf, n_pairs=20_000, sample_steps=100, cfg=TrainConfig(steps=STEPS // 2, seed=1, log_every=0))
probe_eps, probe_labels = eps[:256], labels[:256]
for name, f in (("base", net), ("reflow", tuned)):
    x, _ = euler_sample(f, rf, probe_eps, SamplerConfig(steps=50), probe_labels)
    back = euler_invert(f, rf, x, SamplerConfig(steps=50, direction="data_to_noise"), probe_labels)
    rt = np.median(np.linalg.norm(back - probe_eps, axis=1) / np.linalg.norm(probe_eps, axis=1))
    print(f"{name:7s} straightness {straightness(f, rf, probe_eps, 50, probe_labels):.4f}  round-trip median {rt:.4f}")
_, traj = euler_sample(tuned, rf, eps[:64], SamplerConfig(steps=50, keep_trajectory=True), labels[:64])
trajectories_svg(out / "trajectories_reflow.svg", traj.states, held, "after Reflow")
