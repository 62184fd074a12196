"""
Exception types shared by the laboratory modules
"""

from typing import Optional


class MemoryDMLError(Exception):
    """Base class for all laboratory errors"""


class DegenerateEmbeddingError(MemoryDMLError, ValueError):
    """An embedding (or pre-normalization output) is the zero vector"""

    def __init__(self, message: str = "degenerate embedding"):
        super().__init__(message)


class SchemeError(MemoryDMLError, ValueError):
    """Invalid weight scheme parameters or an unsupported loss family"""


class MemoryNotWarmedError(MemoryDMLError, RuntimeError):
    """Pairs were mined from an empty memory queue"""

    def __init__(self, message: str = "memory not warmed up"):
        super().__init__(message)


class TrainingDivergedError(MemoryDMLError, FloatingPointError):
    """Loss or gradients became non-finite"""

    def __init__(self, message: str = "training diverged", iteration: Optional[int] = None):
        if iteration is not None:
            message = f"{message} at iteration {iteration}"
        super().__init__(message)
        self.iteration = iteration
        self.record = None


class DatasetError(MemoryDMLError, ValueError):
    """Dataset construction or ingestion failed"""


class ConfigError(MemoryDMLError, ValueError):
    """Experiment configuration is invalid"""
