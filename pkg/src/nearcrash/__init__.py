"""Near-crash detection from GPS trajectories with segment risk, regression
and hot-spot analysis."""

__version__ = "0.1.0"
