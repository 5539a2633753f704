"""Values at unobserved pixels never reach the output.

Scrambles every invalid pixel of a sparse input with huge noise and shows the
SI-convolution, SISL and full-network outputs are bit-for-bit unchanged,
while an ordinary convolution is not.
"""

import numpy as np

from sparseconv.data import KITTI_LIKE, synth_scanlines
from sparseconv.layers import ParamStore, si_conv_forward, sisl_forward
from sparseconv.network import NetworkConfig, build_dvmn, forward
from sparseconv.tensor import Tensor, conv2d

rng = np.random.default_rng(0)
sparse, gt = synth_scanlines(32, 64, seed=0, **KITTI_LIKE)
mask = sparse.mask[None, None]
depth = sparse.depth[None, None]
scrambled = np.where(mask > 0, depth, rng.normal(scale=1e4, size=depth.shape))
print(f"input density {sparse.density:.3f}")

store = ParamStore(0, np.float64)
si, sl = store.si_conv("si", 1, 4), store.sisl("sisl", 1, 4)
for name, fn in [("si_conv", lambda x: si_conv_forward(Tensor(x), mask, si)[0].data),
                 ("sisl", lambda x: sisl_forward(Tensor(x), mask, sl)[0].data),
                 ("plain conv", lambda x: conv2d(Tensor(x), si.w, padding=1).data)]:
    diff = np.abs(fn(depth) - fn(scrambled)).max()
    print(f"{name:>10}: max output change {diff:.3g}")

net = build_dvmn(NetworkConfig(C=4, stages=2, bottlenecks_per_stage=2, sisl_count=2), 0).eval()
image = np.repeat(gt.depth[None, None] / 80.0, 3, axis=1)
a = forward(net, depth, mask, image).data
b = forward(net, scrambled, mask, image).data
print(f"   network: outputs identical: {np.array_equal(a, b)}")
