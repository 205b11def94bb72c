"""Multi-camera scene reconstruction with Gaussian splats.

Calibrates a fixed camera rig from tracked wand sweeps, fuses stereo
depth into colored point clouds, trains per-timestamp Gaussian splat
scenes with augmented-view refinement, and renders, evaluates and
replays the result.
"""

__version__ = "0.1.0"
