"""Wheel-angle and policy co-design for a quadruped on passive skates."""

__version__ = "0.1.0"
