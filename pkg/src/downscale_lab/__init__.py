"""Desk-scale downscaling experiments: UNet, L1/L2 losses and gamma preprocessing on synthetic climate fields."""

__version__ = "0.1.0"
