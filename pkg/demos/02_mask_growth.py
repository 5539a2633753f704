"""How fast the validity mask fills in, with and without the switch layer.

Traces the depth-encoder masks for a KITTI-like scan-line input twice: once
with SISL layers in the first stage and once with plain 3x3 SI-convolutions.
Pass an output directory to also write the per-layer mask images.
"""

import sys
import tempfile

from sparseconv import cli
from sparseconv.data import KITTI_LIKE, synth_scanlines
from sparseconv.network import NetworkConfig, build_dvmn, layer_mask_trace

sparse, _ = synth_scanlines(64, 256, seed=3, **KITTI_LIKE)
o = sparse.mask[None, None]
print(f"input density {sparse.density:.3f}\n")

arch = dict(C=1, stages=3, bottlenecks_per_stage=3, dtype="float64")
with_sisl = layer_mask_trace(build_dvmn(NetworkConfig(sisl_count=3, **arch), 0), o)
plain = layer_mask_trace(build_dvmn(NetworkConfig(sisl_count=0, **arch), 0), o)
print(f"{'layer':<14}{'SISL':>8}{'plain':>8}")
for (name, _, d1), (_, _, d0) in zip(with_sisl, plain):
    print(f"{name:<14}{d1:8.3f}{d0:8.3f}")

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="masks-")
cli.main(["mask-report", "--synth", "height=64,width=256,seed=3", "--out", out,
          "--stages", "3", "--bottlenecks", "3", "--sisl-count", "3"])
print(f"\nmask images and densities.tsv written to {out}")
