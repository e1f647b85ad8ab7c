# %% [markdown]
# # Looking at the reference run
#
# `ifal ablation` (or the acceptance suite) leaves a base model, three adapter
# variants and four eval reports under `.reference/runs/ablation`. This script
# reads them back, prints the scores and draws a few layouts with and without
# the adapter.
#
# Run from the repo root: `python3 notebooks/03_reference_run.py`

# %%
import json
from pathlib import Path

import numpy as np
from PIL import Image

from ifadapter import SampleConfig, ToyLDM
from ifadapter.data import load_split

ref = Path(".reference")
run = ref / "runs" / "ablation"
summary = json.loads((run / "summary.json").read_text())
for name, r in summary["results"].items():
    print(f"{name:14s} ifs={r['ifs_rate']:.3f}  ap50={r['ap50']:.3f}  frechet={r['frechet']:.3f}")
print({k: v for k, v in summary.items() if k != "results"})

# %% adapter training curve, 100-step means
recs = [json.loads(l) for l in (run / "adapter_full.ifal.loss.jsonl").read_text().splitlines()]
loss = np.array([r["loss"] for r in recs])
lam = np.array([r["lambda_sites"] for r in recs])
for k in range(0, len(loss), 250):
    print(f"step {k + 1:5d}  loss {loss[k:k + 100].mean():.4f}  tanh(lambda) {np.round(np.tanh(lam[min(k + 99, len(lam) - 1)]), 3)}")

# %% same seeds, base alone vs base + adapter
ev = load_split(ref / "data" / "eval")
lays = ev.layouts[:6]
cfg = SampleConfig(steps=50, cfg_scale=7.5, seed=0)
base = ToyLDM.from_checkpoints(run / "base.ifal")
full = ToyLDM.from_checkpoints(run / "base.ifal", run / "adapter_full.ifal")
rows = [np.concatenate(list(ev.images[:6]), axis=1),
        np.concatenate(list(base.render(base.sample(lays, cfg, use_adapter=False))), axis=1),
        np.concatenate(list(full.render(full.sample(lays, cfg))), axis=1)]
sheet = np.concatenate(rows, axis=0)
Image.fromarray((sheet * 255).round().astype(np.uint8)).resize((sheet.shape[1] * 2, sheet.shape[0] * 2),
                                                                 Image.NEAREST).save("notebooks/reference_samples.png")
print("rows: ground truth, base only, base + adapter -> notebooks/reference_samples.png")
for lay in lays[:3]:
    print(" |", lay.global_caption)
