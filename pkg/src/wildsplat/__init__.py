"""Gaussian-splat reconstruction from images with transient occluders.

A static Gaussian field is fit jointly with a per-view deformable transient
field; a learned mask, refined over superpixels, decides which pixels belong
to which.  Density control can shift new Gaussians along the descent
direction and prune Gaussians whose learned uncertainty is high.
"""
__version__ = "0.1.0"
