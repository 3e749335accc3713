"""Self-supervised camera re-localization with directed scene coordinates, at desk scale.

Per-frame depth and DSC tables stand in for the networks; everything else
(pose recovery, loop-closed view synthesis, losses, evaluation) is the full
pipeline.
"""

__version__ = "0.1.0"
