# %% [markdown]
# # Synthetic shapes and layouts
#
# Every scene is a few colored squares, circles and striped squares on gray.
# The layout (boxes + one phrase per box) is what the adapter gets to see.

# %%
import numpy as np
from PIL import Image

from ifadapter.data import (COLOR_NAMES, label_names, make_sample, palette_labels, parse_description,
                            sample_seed, verify)
from ifadapter.layout import rasterize

# %%
s = make_sample(sample_seed(0, "train", 3))
print(s.layout.global_caption)
for inst in s.layout.instances:
    print(inst.bbox.as_list(), inst.description)

# %% the 16x16 cell masks that the adapter works on
for inst in s.layout.instances:
    m = rasterize(inst.bbox, 16, 16)
    print(inst.description)
    print("\n".join("".join("#" if v else "." for v in row) for row in m))

# %% the verifier checks one box at a time
for inst in s.layout.instances:
    print(inst.description, verify(s.image, inst.bbox, inst.description))
# naming the wrong color flips it
inst = s.layout.instances[0]
color = parse_description(inst.description).color
other = next(c for c in COLOR_NAMES if c not in inst.description)
wrong = inst.description.replace(color, other)
print(wrong, verify(s.image, inst.bbox, wrong))

# %% palette labels per pixel (the detector builds on these)
labels = palette_labels(s.image)
names = label_names()
print({names[k]: int(v) for k, v in zip(*np.unique(labels, return_counts=True))})

# %% a contact sheet of 16 training scenes
imgs = [make_sample(sample_seed(0, "train", i)).image for i in range(16)]
sheet = np.concatenate([np.concatenate(imgs[r * 4:(r + 1) * 4], axis=1) for r in range(4)], axis=0)
Image.fromarray((sheet * 255).round().astype(np.uint8)).resize((512, 512), Image.NEAREST).save("shapes_sheet.png")
print("wrote shapes_sheet.png")
