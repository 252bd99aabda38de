# coding: utf-8

# # The command line, end to end
#
# Builds a small base/fine-tuned checkpoint pair on disk, then runs
# `analyze`, `extract`, `verify` and `merge` through the same entry point
# the `lora-extract` script uses.

# %%
import json
import tempfile
from pathlib import Path

import numpy as np

from lora_extract import Checkpoint, load_checkpoint, save_checkpoint
from lora_extract.cli import main

rng = np.random.default_rng(3)
work = Path(tempfile.mkdtemp(prefix="lora-demo-"))

base, ft = {}, {}
for i in range(4):
    for proj in ("q_proj", "v_proj"):
        name = f"model.layers.{i}.self_attn.{proj}.weight"
        w = rng.standard_normal((256, 256)).astype(np.float32)
        rank = 8 if proj == "q_proj" else 16
        lowrank = rng.standard_normal((256, rank)) @ rng.standard_normal((rank, 256)) * 0.02
        base[name], ft[name] = w, w + lowrank
base["model.norm.weight"] = ft["model.norm.weight"] = np.ones(256, dtype=np.float32)

save_checkpoint(Checkpoint.from_arrays(base, "f32"), work / "base.safetensors")
save_checkpoint(Checkpoint.from_arrays(ft, "f32"), work / "ft.safetensors")
pair = ["--base", str(work / "base.safetensors"), "--finetuned", str(work / "ft.safetensors")]

# %% [markdown]
# Energy at a few probe ranks; the norm vector is skipped because it is 1-D
# and did not change.

# %%
code = main(["analyze", *pair, "--ranks", "4,8,16,32", "--csv", str(work / "energy.csv")])
print("exit code", code)
print((work / "energy.csv").read_text())

# %% [markdown]
# Extract with a per-layer rank chosen by a 99.9% energy threshold.

# %%
code = main(["extract", *pair, "--out", str(work / "adapter"), "--energy-threshold", "0.999"])
manifest = json.loads((work / "adapter" / "extraction_manifest.json").read_text())
print("exit code", code, "ranks", manifest["rank_pattern"])

# %% [markdown]
# Check every layer against a fresh SVD, then merge into the base.

# %%
print("verify exit code", main(["verify", *pair, "--adapter", str(work / "adapter")]))
print("merge exit code", main(["merge", "--base", str(work / "base.safetensors"),
                              "--adapter", str(work / "adapter"),
                              "--out", str(work / "merged.safetensors")]))

merged, target = load_checkpoint(work / "merged.safetensors"), load_checkpoint(work / "ft.safetensors")
worst = max(np.abs(merged.matrix(n) - target.matrix(n)).max() for n in target.names if n.endswith("proj.weight"))
print("largest deviation from the fine-tuned weights:", worst)
print("artifacts in", work)
