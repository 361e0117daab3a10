"""Visual-to-M/EEG brain encoding at desk scale."""
