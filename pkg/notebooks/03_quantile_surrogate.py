# %% [markdown]
# # Quantile surrogate with binary decisions
#
# A multi-output network predicts several quantiles of a noisy response.
# The optimization picks the binary input that minimizes a blend of the
# mean and the upper-tail average of those quantiles.

# %%
import numpy as np

from tractnet import Box
from tractnet.milp import MilpSpec, mean_cvar_weights, solve_milp
from tractnet.network import pinball_np
from tractnet.trainer import TrainConfig, make_dataset, train

K = 5
cfg = TrainConfig(dims=[8, 16, K], epochs=30, seed=0, mode="pinball", benchmark="synth-quantile",
                  n_samples=10000, n_quantiles=K)
tr, te = make_dataset(cfg)
net, rep = train(cfg, tr, te)
s = te.stats
best_q = (te.meta["truth"].quantiles(te.X, te.taus) - s.y_mean) / s.y_std
print("levels:", te.taus)
print(f"test pinball {rep.test_loss:.4f} vs true quantiles {pinball_np(best_q, te.Y[:, 0], te.taus):.4f}")

# %%
w = mean_cvar_weights(te.taus, lam=0.5, alpha=0.7)
res = solve_milp(MilpSpec(net, Box.cube(8, 0, 1), objective=w, binary=True))
print("weights:", np.round(w, 3))
print("chosen input:", res.x.astype(int), "objective:", round(res.objective, 4), "nodes:", res.nodes)

# %%
# brute force over all 256 inputs for comparison
X = ((np.arange(256)[:, None] >> np.arange(8)) & 1).astype(float)
vals = net.predict(X) @ w
print("enumeration:", X[np.argmin(vals)].astype(int), round(vals.min(), 4))
