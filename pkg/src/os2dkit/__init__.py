"""os2dkit: desk-scale one-shot object detection by dense correlation matching.

The pipeline extracts local features from an input image and a single class
exemplar with one shared convolutional extractor, correlates them densely,
regresses a per-location affine alignment from the correlation patterns,
rescores the correlations along the aligned grids, and reads detections off
the resulting score map.  Everything runs on a small hand-rolled autodiff
engine over numpy; no GPU or external ML framework is involved.
"""

__version__ = "0.1.0"
