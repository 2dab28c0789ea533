"""
Global views and jigsaw patch sets
==================================

One source image becomes four training inputs: two global views and two
shuffled 3x3 patch sets. This script draws them side by side.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from detco.augment import make_bundle
from detco.config import desk_config
from detco.data import ToySpec, generate_toy

cfg = desk_config().augment
img = generate_toy(ToySpec(8, 1, 96, seed=0)).images[5]

# the bundle is a pure function of (image, seed)
bundle = make_bundle(img, seed=42, cfg=cfg)
print("global views:", bundle.i_q.shape, bundle.i_k.shape)
print("query patches:", bundle.p_q.patches.shape, "order", bundle.p_q.permutation.tolist())

fig, axes = plt.subplots(1, 5, figsize=(12, 2.6))
axes[0].imshow(img)
axes[0].set_title("source")
axes[1].imshow(bundle.i_q)
axes[1].set_title("I_q")
axes[2].imshow(bundle.i_k)
axes[2].set_title("I_k")


def tile(patches):
    rows = [np.concatenate(list(patches[r * 3 : r * 3 + 3]), axis=1) for r in range(3)]
    return np.concatenate(rows, axis=0)


axes[3].imshow(tile(bundle.p_q.patches))
axes[3].set_title("P_q (shuffled)")
axes[4].imshow(tile(bundle.p_k.patches))
axes[4].set_title("P_k (shuffled)")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig("views.png", dpi=100)
print("wrote views.png")
