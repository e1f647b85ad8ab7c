# %% [markdown]
# # Inside the adapter
#
# A small untrained model is enough to look at the moving parts: instance
# tokens, per-instance semantic maps, the fusion weights and the area gates.

# %%
import numpy as np

from ifadapter import AdapterConfig, BBox, InstanceDescriptor, LayoutSpec, ModelConfig, SampleConfig, ToyLDM
from ifadapter.adapter import area_gates
from ifadapter.layout import rasterize
from ifadapter.nn import Tensor

m = ToyLDM(ModelConfig(), AdapterConfig())
ad = m.adapter

lay = LayoutSpec("a red square and a blue circle", (
    InstanceDescriptor(BBox(0.0, 0.0, 0.5, 0.5), "a red square"),
    InstanceDescriptor(BBox(0.25, 0.25, 0.5, 0.5), "a blue circle"),
))

# %% one token matrix per instance: grounding row, then appearance rows
cond = ad.prepare([lay])
print("tokens", cond.tokens.shape)   # (batch, instances, rows, d)
print("gates ", cond.gates)

# %% nested boxes: the small one gets the larger gate
big, small = rasterize(BBox(0, 0, 0.5, 0.5), 16, 16), rasterize(BBox(0, 0, 0.25, 0.25), 16, 16)
print(area_gates([big, small]))

# %% fusion weights on the overlap
lat = Tensor(np.random.default_rng(0).standard_normal((1, 256, m.config.width)))
D, maps, w = ad.semantic_map(0, lat, cond)
w = w.data[0].reshape(2, 16, 16)
print("weight of the square, rows 2..9, cols 2..9")
print(np.round(w[0, 2:10, 2:10], 2))
print("sum over instances on covered cells:", np.unique(np.round(w.sum(0)[cond.fg[0].reshape(16, 16) > 0], 12)))

# %% cells covered only by the square do not care what the circle is called
lay2 = LayoutSpec(lay.global_caption, (lay.instances[0], InstanceDescriptor(lay.instances[1].bbox, "a green square")))
D2 = ad.semantic_map(0, lat, ad.prepare([lay2]))[0]
only_square = cond.cover[0, 0] & ~cond.cover[0, 1]
print("unchanged where only the square is:", D.data[0][only_square].tobytes() == D2.data[0][only_square].tobytes())
print("changed under the circle:", not np.array_equal(D.data[0][cond.cover[0, 1]], D2.data[0][cond.cover[0, 1]]))

# %% lambda starts at zero, so the fresh adapter is invisible to the sampler
cfg = SampleConfig(steps=8, seed=1)
a = m.sample([lay], cfg)
b = m.sample([lay.without_instances()], cfg)
print("identical samples at init:", a.tobytes() == b.tobytes())
