"""
Base Engine class for the chaotic-SDE sensitivity framework.
Every runnable engine (Monte Carlo, MLMC, Richardson-Romberg) inherits from it.
"""

import logging
from abc import ABC, abstractmethod
from typing import Any, Dict


class BaseEngine(ABC):
    """Abstract base class for all engines in the framework."""

    def __init__(self, name: str, config: Dict[str, Any] = None):
        """
        Initialize the base engine.

        Args:
            name: Name of the engine, used as the logger suffix
            config: Configuration dictionary for the engine
        """
        self.name = name
        self.config = config or {}
        self.logger = logging.getLogger(f"sdesens.{name}")

    @abstractmethod
    def run(self, input_data: Any) -> Any:
        """
        Execute the engine's main computation.

        Args:
            input_data: Request object for the engine to process

        Returns:
            Result object produced by the engine
        """

    def log(self, message: str, level: int = logging.INFO) -> None:
        """Log a message under the engine's name."""
        self.logger.log(level, message)
