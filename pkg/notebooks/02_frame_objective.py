# %% [markdown]
# # Two basins in the per-frame objective
#
# The per-frame MAP objective over `(r_s, r_n, lam)` is not concave. For some
# observations a coordinate ascent started at `lam = 1` settles with the
# speech variance on its floor, while a start at small `lam` finds a much
# better point. `update_frame` can run a second chain from a small `lam` for
# bins that end on the floor; this notebook shows one such bin.

# %%
import numpy as np

from rtbse.rcscme import (RcscmeConfig, RcscmeFrameParams, bounds, derive_fixed, frame_objective,
                          update_frame)

rng = np.random.default_rng(7)


def draw(rng):
    m = int(rng.integers(2, 5))
    W = (rng.standard_normal((1, m, m)) + 1j * rng.standard_normal((1, m, m))) / np.sqrt(2) + np.eye(m)
    fixed = derive_fixed(W, int(rng.integers(m)))
    c = (rng.standard_normal(1) + 1j * rng.standard_normal(1)) / np.sqrt(2)
    n = (rng.standard_normal((1, m)) + 1j * rng.standard_normal((1, m))) / np.sqrt(2)
    return fixed.a_t * c[:, None] * rng.uniform(0.1, 3) + n * rng.uniform(0.1, 3), fixed


for _ in range(307):
    x, fixed = draw(rng)

# %%
init = RcscmeFrameParams(np.ones(1), np.ones(1), np.ones(1), 1.6, 1e-2)
sols = {}
for label, cfg in [("one chain", RcscmeConfig(beta=1e-2, restart_lam=None)),
                   ("with restart", RcscmeConfig(beta=1e-2))]:
    p = sols[label] = update_frame(x, fixed, init, sweeps=200, cfg=cfg, tol=1e-13)
    print(f"{label:12s} r_s={p.r_s[0]:.3g} r_n={p.r_n[0]:.3g} lam={p.lam[0]:.3g} "
          f"objective={frame_objective(x, p, fixed)[0]:.4f}")

# %% [markdown]
# A slice along `lam` with the other two variables at each solution shows
# why single-coordinate moves cannot cross between the basins.

# %%
print("speech floor", bounds(x, fixed)[0][0][0])
for lam in np.logspace(-4, 1, 11):
    row = []
    for p in sols.values():
        q = RcscmeFrameParams(p.r_s, p.r_n, np.array([lam]), 1.6, 1e-2)
        row.append(frame_objective(x, q, fixed)[0])
    print(f"lam {lam:8.1e}  floor basin {row[0]:8.3f}  speech basin {row[1]:8.3f}")
