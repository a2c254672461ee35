"""Few-shot dense landmark detection on a synthetic garment benchmark.

Modules: ``tensor`` (reverse-mode autodiff with recordable backward sweeps),
``data`` (procedural categories, samples, episodes, splits), ``model``
(extractor, detectors, parameter predictor), ``meta`` (base, predictor and
meta training), ``baselines``, ``evaluation``, ``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
