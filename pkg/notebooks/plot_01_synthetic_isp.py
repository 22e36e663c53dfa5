"""
Synthetic camera pipeline
=========================

Render a scene, sample it through an RGGB mosaic, and push the RAW through
the forward ISP to get the paired sRGB-like image that the models learn to
invert.
"""

import numpy as np

from rawflow.data_isp import (
    IspParams,
    RawImage,
    demosaic_bilinear,
    mosaic,
    pack_rggb,
    render_rgb,
    simulate_pair,
    synthesize_scene,
    unpack_rggb,
)

# a 64x64 linear scene: smooth gradients plus a few hard-edged shapes
scene = synthesize_scene(seed=7, size=(64, 64))
print("scene range per channel:", scene.min(axis=(0, 1)).round(3), scene.max(axis=(0, 1)).round(3))

# one sample per pixel through the colour filter array, then the 4-channel half-res layout
bayer = mosaic(scene)
packed = pack_rggb(bayer)
print("mosaic", bayer.shape, "-> packed", packed.shape)
assert np.array_equal(unpack_rggb(packed), bayer)

# bilinear demosaicing keeps the measured sample at every site
rgb_linear = demosaic_bilinear(bayer)
print("max error at measured sites:", float(np.abs(mosaic(rgb_linear) - bayer).max()))

# forward ISP: white balance, colour matrix, clip, gamma, 8-bit quantization
isp = IspParams()
rgb = render_rgb(RawImage(packed, bit_depth=12), isp)
print("rendered RGB", rgb.data.shape, "distinct levels:", len(np.unique(rgb.data)))

# simulate_pair does all of the above and quantizes the RAW to 12 bits
rgb, raw = simulate_pair(seed=7, size=(64, 64), params=isp)
print("pair:", rgb.data.shape, raw.data.shape, "RAW mean", raw.data.mean().round(4))

# the gamma curve brightens shadows: rendered values sit well above linear RAW values
print("mean rendered RGB", rgb.data.mean().round(3), "vs mean RAW", raw.data.mean().round(3))
