"""Conditional sequence diffusion prior with a synthetic oracle world.

Modules: ``schedule`` (noise schedule), ``denoiser`` (transformer), ``prior``
(training, guided sampling, editing, AR baseline), ``disentangle`` (feature-split
losses), ``world`` (synthetic data), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
