# %% [markdown]
# # Train, evaluate and trace a small model
#
# A reduced configuration (32 px images, small agent) so the whole script
# runs in well under a minute.

# %%
import numpy as np

from recattn.cli import trace_records
from recattn.data import SceneSpec, generate_dataset
from recattn.training import TrainConfig, Trainer, evaluate, prior_map

# %%
spec = SceneSpec(canvas_size=32)
train = generate_dataset(spec, 200)
test = generate_dataset(spec, 100, offset=10 ** 6)
print("label frequencies:", train.labels.mean(axis=0).round(2))
print("prior mAP:", round(prior_map(test.labels), 4))

# %%
cfg = TrainConfig(input_size=32, crop_margin=8, eval_scales=(32,), crop_size=3,
                  d_embed=32, d_hidden=32, T=3, epochs=5)
trainer = Trainer(cfg)
for row in trainer.fit(train):
    print({k: round(float(v), 4) for k, v in row.items()})

# %%
report = evaluate(trainer.model, test)
print(report.to_text())

# %% [markdown]
# Regions visited on one test image, iteration by iteration.

# %%
for rec in trace_records(trainer.model, test.images[0]):
    best = max(rec["regions"], key=lambda r: r["top3"][0][1])
    print(rec["iteration"], np.round(rec["location"], 3), "best region", best["region"],
          "top class", best["top3"][0][0], "truth", np.flatnonzero(test.labels[0]).tolist())
