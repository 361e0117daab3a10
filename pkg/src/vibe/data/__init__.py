"""Container format, presets, region masks, synthetic data and evaluation splits."""
