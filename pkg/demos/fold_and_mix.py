"""Fold and mix a synthetic fingerprint, then embed the results."""

import numpy as np

from ifom.datagen import SyntheticSpec, generate
from ifom.models import BackboneConfig, build_extractor, embed
from ifom.transforms import FoldSpec, MixSpec, fold, mix, sample_fold_spec

spec = SyntheticSpec("fingerprint", (32, 32), 4, "woodglue-analog", 0.03, seed=0)
a = generate(spec, "bona_fide", 0)
b = generate(spec, "attack", 1)
print(a.shape, a.pixels.min(), a.pixels.max())  # (1, 32, 32), values in [0, 1]

# random fold: two cuts, four quadrants, a coin flip per quadrant
rng = np.random.default_rng(0)
s = sample_fold_spec(rng, "fingerprint")
print(s)
folded = fold(a, s)
print(np.abs(folded.pixels - a.pixels).mean())  # how far the fold moved the image

# a hand-written fold: centre cuts, no flips
centre = fold(a, FoldSpec("fingerprint", 0.5, 0.5, (False,) * 4))

# mixing is a convex blend; eps=1 returns the first image
m = mix(a, b, MixSpec(0.3))
print(np.allclose(m.pixels, 0.3 * a.pixels + 0.7 * b.pixels))
print(np.array_equal(mix(a, b, MixSpec(1.0)).pixels, a.pixels))

# embeddings of a mix vs the mix of embeddings (untrained, so they differ)
ext = build_extractor(BackboneConfig(), seed=0)
z = embed(ext, np.stack([a.pixels, b.pixels, m.pixels, folded.pixels, centre.pixels]))
print(z.shape)  # (5, 32)
print(float((z[2] - (0.3 * z[0] + 0.7 * z[1])).norm()))
