"""Cross-view ground-to-aerial localization on a synthetic world.

Submodules: ``autodiff`` (tensors and backprop), ``models`` (extractors),
``synthworld`` (procedural data), ``trainer`` (pretraining and cross-view
regression), ``geoindex`` (reference index and rank metrics), ``viz``
(heatmaps and reports), ``pipeline`` (end-to-end run) and ``cli``.
"""

__version__ = "0.1.0"
