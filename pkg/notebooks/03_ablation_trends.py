# %% [markdown]
# # Ablation trends
#
# Reads the cached 40-epoch runs written by `python -m recattn.experiments`
# and tabulates the three-seed mean test mAP of every variant.

# %%
import json
import os
from pathlib import Path

import numpy as np

from recattn.experiments import SEEDS, trend_variants

results = Path(os.environ.get("RECATTN_RESULTS", "results/trends"))

# %%
rows = []
for name, cfg in trend_variants().items():
    maps = []
    for seed in SEEDS:
        c = cfg.replace(seed=seed)
        path = results / f"{c.fingerprint()}-e{c.epochs}-4000-1000-s0.json"
        if path.exists():
            maps.append(json.loads(path.read_text())["map"])
    rows.append((name, maps))

for name, maps in rows:
    if maps:
        print(f"{name:18s} mean mAP {np.mean(maps):.4f} over {len(maps)} seeds  {np.round(maps, 4)}")
    else:
        print(f"{name:18s} no cached runs")
