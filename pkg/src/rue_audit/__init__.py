"""Post-hoc pointwise reliability scores for trained regression networks."""

__version__ = "0.1.0"
