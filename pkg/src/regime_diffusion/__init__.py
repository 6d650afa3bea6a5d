"""Regime-conditioned diffusion residual models for aerial-manipulator control.

Submodules: ``nncore`` (autodiff and layers), ``plant`` (simulator),
``dataset`` (collection and segmentation), ``encoder`` (regime descriptor),
``diffusion`` (residual generator), ``controller`` (adaptive sliding mode),
``baselines``, ``closed_loop``, ``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
