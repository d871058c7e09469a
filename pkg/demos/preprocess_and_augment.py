"""Write a few phantom records, preprocess one and save a strip of augmented views.

    python3 demos/preprocess_and_augment.py out_dir
"""
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from tumorbench import AugmentationConfig, AugmentationRng, apply_augmentations, load_dataset, preprocess_pipeline  # noqa: E402
from tumorbench.synthetic import write_phantom_dataset  # noqa: E402

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
write_phantom_dataset(out / "data", 1, seed=0, size=512)
rec = load_dataset(out / "data").records[0]
x = preprocess_pipeline(rec.image)

cfg = AugmentationConfig()
views = [apply_augmentations(x, cfg, None, training=False)]
views += [apply_augmentations(x, cfg, AugmentationRng.for_sample(0, epoch, 0), training=True) for epoch in range(1, 5)]

fig, axes = plt.subplots(1, 6, figsize=(15, 3))
axes[0].imshow(rec.image, cmap="gray")
axes[0].set_title(f"raw ({rec.label.value})")
for ax, v, t in zip(axes[1:], views, ["eval path"] + [f"epoch {e}" for e in range(1, 5)]):
    ax.imshow(v[..., 0], cmap="gray", vmin=0, vmax=1)
    ax.set_title(t)
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "augmentations.png", dpi=80)
print("wrote", out / "augmentations.png")
