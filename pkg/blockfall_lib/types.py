from typing import Tuple

import numpy as np

Pixels = int
SubPixels = float
Degrees = float
MetersPerPixel = float
Intensity = float

BoolMask = np.ndarray
LabelImage = np.ndarray
Point = Tuple[float, float]
"""(x, y) in pixel coordinates, x to the right, y down."""
BoxTuple = Tuple[float, float, float, float]
"""(x, y, width, height) of an axis aligned box."""
