"""Point-prompted pseudo-label mining: proposal selection, box mining and affinity refinement."""

__version__ = "0.1.0"
