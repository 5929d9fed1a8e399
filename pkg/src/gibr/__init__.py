"""Generative image-based rendering.

A multi-view denoising diffusion model whose denoiser builds an explicit
3D scene (per-view feature planes) at every step and renders it back to
the input viewpoints with a differentiable volumetric renderer.
"""

__version__ = "0.1.0"
