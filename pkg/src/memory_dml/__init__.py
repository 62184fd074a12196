"""
Memory-based Deep Metric Learning Laboratory

Pair weighting decomposition, embedding memory with momentum encoder,
and the diagnostics built on them
"""

__version__ = "1.0.0"
