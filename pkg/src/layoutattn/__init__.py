"""Layout-guided toy image generation with spatial-temporal attention control.

Subpackages and modules:

* :mod:`layoutattn.scene_dsl` parses and generates scene descriptions.
* :mod:`layoutattn.layout` holds the mixture layout predictor and its I/O.
* :mod:`layoutattn.attention` implements masked cross-attention combination.
* :mod:`layoutattn.generator` runs the deterministic toy denoising loop.
* :mod:`layoutattn.scorer` and :mod:`layoutattn.optimizer` fit the combination weights.
* :mod:`layoutattn.evaluation` detects objects and scores whole benchmarks.
"""

__version__ = "0.1.0"
