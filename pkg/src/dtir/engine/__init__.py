"""Losses and training procedures built on the tensor core."""
