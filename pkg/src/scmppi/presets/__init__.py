"""Bundled experiment presets (YAML files, one per study)."""
