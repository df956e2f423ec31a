"""Convolutional-recurrent AFib detection on raw PPG, implemented on numpy.

Modules:

- :mod:`ppgrhythm.signal`    records, labels, datasets, record files, subject splits
- :mod:`ppgrhythm.synth`     synthetic PPG with NSR / AFib rhythms and spliced episodes
- :mod:`ppgrhythm.model`     architecture, weights, batch inference, model files
- :mod:`ppgrhythm.stream`    constant-memory streaming inference
- :mod:`ppgrhythm.backprop`  training-mode forward pass and exact gradients
- :mod:`ppgrhythm.training`  loss, Adam, plateau annealing, augmentation, ``fit``
- :mod:`ppgrhythm.metrics`   ROC/AUC, Brier, operating points, episode harness
- :mod:`ppgrhythm.interpret` filter analysis, channel ordering, embedding projection
- :mod:`ppgrhythm.cli`       the ``ppgrhythm`` command
"""

__version__ = "0.1.0"
