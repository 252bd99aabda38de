# coding: utf-8

# # How much of a delta does rank r keep?
#
# Preserved energy E_r is the share of squared singular values kept by the
# top r directions. Deltas with fast-decaying spectra reach high energy at
# small rank; noise-like deltas do not.

# %%
import numpy as np

from lora_extract import EnergyCurve, build_report, select_rank, svd_thin

rng = np.random.default_rng(1)


def spectrum(decay, shape=(128, 96)):
    u, _ = np.linalg.qr(rng.standard_normal((shape[0], shape[1])))
    v, _ = np.linalg.qr(rng.standard_normal((shape[1], shape[1])))
    sigma = decay ** np.arange(shape[1])
    return (u * sigma) @ v.T


deltas = {
    "fast (0.7)": spectrum(0.7),
    "medium (0.9)": spectrum(0.9),
    "slow (0.98)": spectrum(0.98),
    "noise": rng.standard_normal((128, 96)),
}

curves = [EnergyCurve.from_sigma(name, svd_thin(m).sigma, m.shape) for name, m in deltas.items()]

# %% [markdown]
# Ranks needed for a few thresholds:

# %%
for c in curves:
    sigma = np.sqrt(c.sigma_sq)
    picks = {tau: select_rank(sigma, tau) for tau in (0.5, 0.9, 0.99)}
    print(f"{c.layer_name:>14}: " + ", ".join(f"tau={t} -> r={r}" for t, r in picks.items()))

# %% [markdown]
# The model-level report averages over layers at each probe rank, both
# plainly and weighted by layer size. Here it is as CSV:

# %%
report = build_report(curves, [1, 4, 16, 64])
print(report.to_csv())

# %% [markdown]
# Plot the curves if matplotlib is around.

# %%
try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None

if plt is not None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for c in curves:
        ax.plot(np.arange(1, c.cumulative.size + 1), c.cumulative, label=c.layer_name)
    ax.set_xscale("log")
    ax.set_xlabel("rank r")
    ax.set_ylabel("preserved energy E_r")
    ax.legend()
    fig.tight_layout()
    fig.savefig("energy_curves.png", dpi=120)
    print("wrote energy_curves.png")
