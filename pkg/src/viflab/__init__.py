"""Attention-trajectory analysis and visual-flow relay on a seeded toy VLM."""

__version__ = "0.1.0"
