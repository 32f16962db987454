"""Desk-scale controllable landscape-painting diffusion with edge and style control."""

__version__ = "0.1.0"

STYLES = ("azure_green", "golden_splendor", "ink_wash", "light_vermilion")
