"""Cooperative control of connected automated vehicles at an unsignalised
junction with value-decomposition multi-agent reinforcement learning."""

__version__ = "0.1.0"
