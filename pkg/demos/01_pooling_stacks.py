"""Pooling walkthrough: from a stack of feature maps to one descriptor.

A convolutional layer's output for one image is a stack of K spatial
maps. Each map reacts to some visual concept; where it reacts does not
matter for whole-image matching, so we collapse every map to a single
number. This script builds a toy stack by hand, pools it three ways,
and shows why max and avg see different things.
"""
import tempfile
from pathlib import Path

import numpy as np

from poolrank import FeatureMapStack, pool, read_descriptor, write_descriptor

rng = np.random.default_rng(0)

# Two hand-made 4x4 maps: a single sharp peak, and a broad plateau.
peak = np.zeros((4, 4), dtype=np.float32)
peak[1, 2] = 9.0
plateau = np.full((4, 4), 1.5, dtype=np.float32)
stack = FeatureMapStack("toy", "rot0", np.stack([peak, plateau]))

print("map 0: one strong activation, map 1: uniform activation")
for strategy in ("max", "avg", "hybrid"):
    d = pool(stack, strategy)
    print(f"  {strategy:6s} -> dim {d.dim}: {np.round(d.values, 3)}")

# max treats the two maps as equally strong only on the peak map; avg
# dilutes the peak by the empty cells. hybrid keeps both readings,
# doubling the descriptor length.

print()
print("a realistic stack: 256 maps of 6x6 activations")
big = FeatureMapStack("img1", "rot0", rng.standard_normal((256, 6, 6)).astype(np.float32))
for strategy in ("max", "avg", "hybrid"):
    d = pool(big, strategy)
    print(f"  {strategy:6s} -> dim {d.dim}, mean {d.values.mean():+.4f}")

# Descriptors are themselves stored as K x 1 x 1 stacks, so a pooled
# vector round-trips through the same tensor file format.
out = Path(tempfile.mkdtemp(prefix="poolrank_demo_")) / "img1__rot0.fms"
write_descriptor(pool(big, "avg"), out)
back = read_descriptor(out, image_id="img1", view="rot0")
print()
print(f"wrote {out} ({out.stat().st_size} bytes), re-read dim {back.dim}")
assert np.array_equal(back.values, pool(big, "avg").values)
print("round trip is bit exact")
