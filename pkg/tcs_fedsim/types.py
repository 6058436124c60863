"""
Type definitions for tcs_fedsim
"""
from typing import Literal, Tuple, Union

import numpy as np
import numpy.typing as npt

# Array aliases
FloatArray = npt.NDArray[np.float64]
IndexArray = npt.NDArray[np.int64]
BitArray = npt.NDArray[np.uint8]
LabelArray = npt.NDArray[np.int64]

# Scheme and option names
Scheme = Literal["topk", "randk", "tcs"]
RunScheme = Literal["dense", "topk", "randk", "tcs"]
Fairness = Literal["none", "plf", "lf"]
QuantizerKind = Literal["none", "scaled_sign", "fractional"]
ModelKind = Literal["logreg", "mlp"]
DatasetKind = Literal["synthetic", "csv"]
PositionCoding = Literal["block", "log2d"]

# Milestone: (epoch, factor)
Milestone = Tuple[float, float]

# Config values accepted from files and --set overrides
ConfigScalar = Union[int, float, str, bool, None]
