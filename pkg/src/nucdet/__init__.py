"""Multi-dataset cell nucleus detection and classification.

A single detection-transformer trunk with per-dataset prediction heads,
prompt-conditioned feature enhancement over a category memory bank, and
denoising-query training, evaluated with radius-gated centroid F-scores.
"""

__version__ = "0.1.0"
