# %% [markdown]
# # Bounds, stability and the LP relaxation
#
# A small ReLU network, its interval bounds over a box, and how far the
# big-M relaxation sits from the true output at a few inputs.

# %%
import numpy as np

from tractnet import Box, Network, propagate_ibp
from tractnet import lp

net = Network.init([2, 8, 8, 1], seed=0)
box = Box([-1.0, -1.0], [1.0, 1.0])
prof = propagate_ibp(net, box)

# %%
for l in range(1, net.n_hidden_layers + 1):
    print(f"layer {l}: L={np.round(prof.lower[l], 2)}")
    print(f"         U={np.round(prof.upper[l], 2)}")
print("unstable neurons:", len(prof.unstable), "of", net.n_hidden)

# %% [markdown]
# Fixing the input leaves only the unstable neurons relaxed, so the gap
# below is the pointwise gap at each sample.

# %%
rng = np.random.default_rng(1)
for x in box.sample(5, rng):
    f = net(x)[0]
    lo = lp.solve_lp(lp.build_fixed_input_lp(net, prof, x, sense="min")).value
    hi = lp.solve_lp(lp.build_fixed_input_lp(net, prof, x, sense="max")).value
    print(f"x={np.round(x, 3)}  f={f:+.4f}  relaxation [{lo:+.4f}, {hi:+.4f}]")

# %%
# the same model in CPLEX-LP text, for inspection with an external solver
print(lp.to_lp_format(lp.build_box_input_lp(net, prof, box))[:400])
