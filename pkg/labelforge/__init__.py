"""
Lidar Label Forge - lifts 2D instance masks and feature tokens into Lidar
panoptic pseudo-labels, classifies them zero-shot and evaluates them.
"""

__version__ = "1.0.0"
