"""Intent detection from pose and facial-emotion streams.

Modules: ``datamodel`` (records, windows, file formats), ``features``
(bounding-box normalisation, standardisation, adapter input), ``neuro``
(layers, losses, optimiser), ``mintrvae`` (recurrent VAE generator and
rebalancing), ``intentnet`` (window classifiers), ``evalkit`` (metrics and
protocols), ``synthgen`` (procedural scenes) and ``stream`` (online engine).
"""

__version__ = "0.1.0"
