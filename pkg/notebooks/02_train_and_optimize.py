# %% [markdown]
# # Training with a bound-width penalty, then optimizing the surrogate
#
# Two short runs on the peaks function, with and without the width
# penalty, followed by branch-and-bound on each trained network.

# %%
import numpy as np

from tractnet import propagate_ibp
from tractnet.milp import MilpSpec, solve_milp
from tractnet.regularizers import RegularizerConfig
from tractnet.trainer import TrainConfig, make_dataset, train

runs = {}
for name, reg in [("none", RegularizerConfig()), ("bw", RegularizerConfig(bw=1e-2))]:
    cfg = TrainConfig(dims=[2, 16, 16, 1], epochs=20, seed=0, reg=reg, benchmark="peaks", n_samples=5000)
    tr, te = make_dataset(cfg)
    net, rep = train(cfg, tr, te)
    runs[name] = (net, rep, tr.box)
    print(f"{name:5s} test mse={rep.test_loss:.4f} |U|={rep.unstable} mean width={rep.mean_width:.2f}")

# %%
for name, (net, rep, box) in runs.items():
    res = solve_milp(MilpSpec(net, box, time_limit=30))
    print(f"{name:5s} min={res.objective:+.4f} nodes={res.nodes} root gap={res.root_lp_gap:.4f} "
          f"time={res.time_s:.2f}s status={res.status}")

# %%
# width over epochs
for name, (_, rep, _) in runs.items():
    print(name, np.round(rep.epoch_width[::4], 2))
