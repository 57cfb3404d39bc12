"""Perceptive hierarchical locomotion over procedural box worlds.

A numpy library covering the full pipeline: a small reverse-mode autodiff
core, a simplified quadruped simulator on axis-aligned box terrain, PPO with
a hybrid discrete/continuous head and mirror-symmetry augmentation, five
position-commanded locomotion skills, an auto-regressive 3D scene
reconstruction stack, and a 5 Hz navigation policy that selects skills and
intermediate commands from the reconstruction latent.
"""

__version__ = "0.1.0"
