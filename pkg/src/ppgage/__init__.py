"""Distribution-aware vascular-age regression from PPG waveforms.

Library layout:

- ``label_distribution``: label density estimation and pseudo-label batches
- ``soft_sort``: differentiable sorting with exact gradients
- ``dist_loss``: the combined sample-wise + distributional loss
- ``net``: self-contained 1D residual-SE convolutional regressor
- ``synthetic``: synthetic PPG cohorts with ground-truth vascular offsets
- ``survival``: Cox/KM/log-rank/spline/logistic statistics harness
- ``cli``: deterministic experiment pipeline
"""

__version__ = "0.1.0"
