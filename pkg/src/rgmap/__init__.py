"""Accelerated T1rho mapping on synthetic phantoms.

Reconstruct two of five spin-lock contrasts from undersampled multi-coil
k-space, synthesize the missing three, and fit a T1rho map.
"""

__version__ = "0.1.0"
