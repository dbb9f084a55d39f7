"""Derivative-based early fault warning for engine telemetry."""
import os

__version__ = os.getenv("SEMANTIC_VERSION", "dev")
