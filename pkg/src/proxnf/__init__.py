"""Dynamic circular-Radon imaging with partition-of-unity neural fields.

Subpackages cover the measurement model (`crt`), a synthetic perfusion
phantom (`phantom`), the neural-field representation and its embedding
solvers (`pounet`), proximal-splitting reconstruction (`solver`), low-rank
reference methods (`baselines`), image-quality metrics (`metrics`), and
file formats plus the command-line interface (`io`, `cli`).
"""

from proxnf.grid import ImageStack, RoiMask, SpacetimeGrid

__all__ = ["SpacetimeGrid", "ImageStack", "RoiMask"]
__version__ = "0.1.0"
