# %% [markdown]
# # Building blocks
#
# The autodiff engine, anchors around a location and a bilinear crop on a
# hand-made feature map.

# %%
import numpy as np

from recattn import autodiff as ad
from recattn.regions import AnchorConfig, Location, anchor_boxes, crop_bilinear, generate_anchors

# %% [markdown]
# A two-layer tanh network and its gradient against central differences.

# %%
rng = np.random.default_rng(0)
w1, w2 = rng.normal(size=(4, 8)), rng.normal(size=(8, 1))


def net(x):
    h = ad.tanh(ad.matmul(x, ad.constant(w1)))
    return ad.sum(ad.matmul(h, ad.constant(w2)))


x0 = rng.normal(size=(3, 4))
print("max relative error:", ad.grad_check(net, x0))

# %% [markdown]
# Nine anchors (three areas times three aspect ratios) around a location
# near the corner; boxes that leave the unit square are clipped.

# %%
for region in generate_anchors(Location(0.9, 0.15), AnchorConfig()):
    x0_, y0_, x1_, y1_ = region.bounds
    print(f"x {x0_:.3f}..{x1_:.3f}  y {y0_:.3f}..{y1_:.3f}")

boxes = anchor_boxes(np.array([[0.5, 0.5]]), AnchorConfig())
print("batched boxes:", boxes.shape)

# %% [markdown]
# Cropping the whole unit square of a ramp returns the ramp resampled.

# %%
fmap = np.tile(np.arange(8.0), (1, 8, 1))  # (C=1, H=8, W=8), value = column index
whole = generate_anchors(Location(0.5, 0.5), AnchorConfig(areas=(1.0,), ratios=(1.0,)))[0]
print(crop_bilinear(fmap, whole, 5).data[0])
