"""
Recipes, target vectors and the toy renderer
============================================

A recipe is a set of named sliders plus one option per discrete slot.
The codec flattens it into the vector the networks regress, and the toy
renderer draws it as a 64x64 gray face.
"""

import numpy as np
from PIL import Image

from f2p.adapt import register, toy_stylizer
from f2p.codec import decode, encode, normalize_scale, parse_mhm, serialize_mhm
from f2p.synthfaces import FEATURE_REGIONS, AugmentationRanges, crop_region, random_recipe, render, toy_schema

schema = toy_schema()
rng = np.random.default_rng(0)
recipe = random_recipe(schema, rng)

# the mhm text form keeps six decimals and survives a parse/serialize cycle
text = serialize_mhm(recipe, schema)
print(text)
assert serialize_mhm(parse_mhm(text, schema), schema) == text

# continuous sliders map to [-1, 1], every slot becomes a one-hot block
vec = encode(recipe, schema)
for name, v in zip(schema.coordinate_names(), vec.values):
    print(f"{name:<40} {v:+.3f}")
print(decode(vec, schema) == recipe)

# head scale is redundant with the coupled feature sizes; folding it away
# changes the recipe but not the picture
folded = normalize_scale(recipe, schema)
print(np.array_equal(render(recipe, schema)[0], render(folded, schema)[0]))

# a posed render, its registration back to the canonical eye positions,
# the posterized training style and the three region crops
aug = AugmentationRanges().sample(rng)
image, landmarks = render(recipe, schema, aug)
registered, tf = register(image, landmarks[0], landmarks[1], background=aug.background_level)
print("rotation undone:", np.rad2deg(tf.rotation).round(2), "deg")

tiles = [image, registered, toy_stylizer(image, 4)]
tiles += [np.asarray(Image.fromarray(crop_region(image, landmarks, r)).resize((64, 64))) for r in FEATURE_REGIONS]
Image.fromarray(np.hstack(tiles)).resize((64 * len(tiles) * 3, 64 * 3), Image.NEAREST).save("codec_and_renderer.png")
