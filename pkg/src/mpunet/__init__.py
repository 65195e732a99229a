"""Multiplanar volumetric segmentation with UNet-family 2D cores, in numpy.

Modules:

* ``volume``      volumes, containers, robust scaling, phantoms, Dice
* ``multiplanar`` view sampling, oblique slicing, nearest-point back-mapping
* ``augment``     elastic deformation
* ``nncore``      NHWC autodiff graph, Adam, checkpoints, gradient checks
* ``unetzoo``     UNet / UNet2+ / UNet3+ builders and parameter accounting
* ``fusion``      learned linear fusion of per-plane probabilities
* ``pipeline``    folds, training with early stopping, experiments
* ``evalstats``   t-test, Wilcoxon tests, box-whisker summaries
* ``cli``         the ``mpunet`` command
"""

__version__ = "0.1.0"
