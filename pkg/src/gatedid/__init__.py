"""Gated identity injection for a toy latent diffusion model.

Modules: ``tensor`` (reverse-mode autodiff), ``saa`` (gated face
cross-attention and layout policies), ``pipeline`` (noise schedule,
denoiser, DDIM), ``world`` (synthetic face world), ``encoders``, ``imr``
(identity/motion reconfiguration), ``training``, ``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
