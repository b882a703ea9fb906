"""AeroLite: desk-scale tag-guided captioning pipeline for aerial imagery."""

__version__ = "0.1.0"
