"""Attentive neural process interpolation of sparse biomass observations."""

__version__ = "0.1.0"
