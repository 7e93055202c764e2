"""Sparse delayed state feedback co-design."""
