"""Cascaded fully convolutional networks with a dense 3D CRF for liver and lesion segmentation.

Subpackages and modules:

- ``volgrid``: volumes on voxel grids, file format, resampling, ROI crop/embed
- ``preprocess``: HU windowing, histogram equalization, slice augmentation
- ``phantom``: synthetic abdominal volumes with known ground truth
- ``minifcn``: a small U-Net style FCN with hand-written backpropagation
- ``cascade``: liver-then-lesion cascaded inference
- ``densecrf``: fully connected 3D CRF with mean-field inference
- ``evalmetrics``: Dice, VOE, RVD, ASD and MSD
- ``cli``: the command-line workflow
"""

__version__ = "0.1.0"
