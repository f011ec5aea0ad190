"""Context-aware, camera-controllable toy video diffusion.

Subpackages: geometry (epipolar math), nn (autodiff kernels), encoder
(dual-stream context encoder), diffusion (toy latent diffusion), metrics
(frame and trajectory errors), harness (synthetic scenes and experiments).
"""

__version__ = "0.1.0"
