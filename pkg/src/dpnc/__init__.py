"""Differentially private non-convex optimization toolkit."""
