"""Harmonic plus residual analysis of sustained violin notes and VAE models of their cepstral envelopes."""

__version__ = "0.1.0"

__all__ = ["dsp_core", "hpr", "envelope", "dataset", "pipeline", "nn", "models", "eval", "cli"]
