"""Compartmentalization toolkit: sandbox specs, cross-boundary allocation
analysis, boundary instrumentation and a simulated multi-domain runtime."""

__version__ = "0.1.0"
