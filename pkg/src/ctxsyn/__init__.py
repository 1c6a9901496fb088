"""Context-aware video frame interpolation.

Pipeline: bidirectional optical flow -> per-pixel context extraction ->
validity-checked forward warping of frames and context maps to time t ->
GridNet synthesis of the intermediate frame.
"""

__version__ = "0.1.0"
