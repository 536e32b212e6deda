"""Diffusion behavior cloning with a decoupled action head.

Subpackages cover the autodiff core, arm kinematics, trajectory synthesis,
denoising schedules and samplers, denoiser backbones, two-stage training,
a small planar manipulation environment suite, and a CLI.
"""

__version__ = "0.1.0"
