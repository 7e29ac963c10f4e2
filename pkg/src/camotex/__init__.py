"""Adversarial camouflage texture optimization at desk scale.

A self-contained pipeline that renders a low-poly truck with a software
rasterizer, trains a small photorealism enhancer and a grid object
detector on the synthetic scenes, and then optimizes the truck's body
texture under smoothness and pixel-range constraints so the detector
stops finding the truck.
"""

__version__ = "0.1.0"

from camotex.errors import ConfigError, EmptyMaskError, NumericError

__all__ = ["ConfigError", "EmptyMaskError", "NumericError", "__version__"]
