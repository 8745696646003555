"""Walk one synthetic impression from minutiae to transformer tokens.

    python3 demos/minutiae_tokens.py
"""

import numpy as np

from fpvit.minutiae import MinutiaeSet, build_minutiae_map, orientation_channel, recover_minutiae
from fpvit.synthdata import make_template, render_impression
from fpvit.tokenizer import preprocess, tokenize

tpl = make_template(identity=3, seed=11)
image, mset = render_impression(tpl, 0)
print(f"impression {image.shape}, {len(mset)} minutiae")

# Each minutia lands in the channel for its orientation half-plane.
counts = np.bincount([orientation_channel(m.theta) for m in mset], minlength=2)
print("per-channel minutiae:", counts.tolist())

mmap = build_minutiae_map(mset, channels=2, sigma=3.0)
print("map", mmap.data.shape, "peak", float(mmap.data.max()))

# Local maxima of the map give the points back on the pixel grid;
# orientation comes back as the channel midpoint.
back = recover_minutiae(mmap, 0.5)
same = sorted((m.x, m.y) for m in back) == sorted((round(m.x), round(m.y)) for m in mset)
print(f"recovered {len(back)} minutiae, rounded positions identical: {same}")

img = preprocess(image, 224)
for label, m in (("image only", None), ("image + map", mmap)):
    tok = tokenize(img, m, 16)
    print(f"{label:>12}: {tok.data.shape[0]} tokens of width {tok.data.shape[1]}")

empty = build_minutiae_map(MinutiaeSet(224, 224), 2, 3.0)
print("empty set gives an all-zero map:", not empty.data.any())
