"""Fixed parameters of the pseudo-real domain gap.

This module is private on purpose: the gap must stay unknown to the
augmentation search, which only ever sees frames that already went through
the distortion pipeline. Nothing outside scenegen's dataset/observation
generators may import it; a test audits that.
"""

from .scenegen import DistortionProfile

# Kinect-style defaults: shadowed depth edges, 11-bit quantization, a smooth
# calibration bias, per-pixel sensor noise, and occasional dead pixels.
DEFAULT_PROFILE = DistortionProfile(
    edge_shadow_radius=2,
    quantization_bits=11,
    bias_amplitude=0.02,
    gaussian_sigma=0.01,
    dead_pixel_rate=0.005,
)
