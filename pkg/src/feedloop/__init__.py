"""Agent-based simulation of recommendation and social-network co-evolution."""

__version__ = "0.1.0"
