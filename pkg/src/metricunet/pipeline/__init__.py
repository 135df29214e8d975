"""Two-stage segmentation pipeline."""
