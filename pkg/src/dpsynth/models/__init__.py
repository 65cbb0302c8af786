"""Desk-scale sequence models trained with (or without) DP-SGD."""
