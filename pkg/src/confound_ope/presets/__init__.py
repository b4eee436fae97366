"""Shipped experiment presets (TOML)."""
