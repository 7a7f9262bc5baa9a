"""
Shared attention gates for two feature streams
==============================================

The cross-modal attention block sums the RGB and depth features, derives one
channel gate and one spatial gate from that sum, applies both gates to each
stream and projects the concatenation back to the input width. Because the
gates only see the sum, swapping the two streams leaves them unchanged.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from dpf_nutrition.model import CrossModalAttention, cab_fuse, channel_attention, spatial_attention

torch.manual_seed(0)
block = CrossModalAttention(8).eval()

# an RGB map with a bright square and a depth map with a raised disc
yy, xx = torch.meshgrid(torch.arange(16.0), torch.arange(16.0), indexing="ij")
rgb = torch.zeros(1, 8, 16, 16)
rgb[..., 3:8, 3:8] = 1.0
depth = ((xx - 10) ** 2 + (yy - 10) ** 2 < 16).float().expand(1, 8, 16, 16) * 0.8

with torch.no_grad():
    ca = channel_attention(block, rgb, depth)
    sa = spatial_attention(block, rgb, depth)
    fused = cab_fuse(block, rgb, depth)
    swapped = spatial_attention(block, depth, rgb)

print("channel gate:", [round(v, 3) for v in ca.flatten().tolist()])
print("gates identical after swapping streams:", torch.equal(sa, swapped))
print("fused shape:", tuple(fused.shape))

fig, axes = plt.subplots(1, 3, figsize=(9, 3))
for ax, img, title in zip(axes, (rgb[0, 0], depth[0, 0], sa[0, 0]), ("RGB channel 0", "depth channel 0", "spatial gate")):
    ax.imshow(img, cmap="magma")
    ax.set_title(title)
    ax.axis("off")
fig.savefig("attention_gates.png", dpi=100, bbox_inches="tight")
print("wrote attention_gates.png")
