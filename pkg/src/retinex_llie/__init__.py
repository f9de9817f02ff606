"""Retinex-style low-light image enhancement: decomposition and enhancement
U-Nets, a noise/color-bias control feature network, the training losses,
a desk-scale trainer and an image-quality metric harness."""

__version__ = "0.1.0"
