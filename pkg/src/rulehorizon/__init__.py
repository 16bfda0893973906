"""Highway traffic-rule robustness, lattice planning, and graph-critic training."""

__version__ = "0.1.0"
