"""Conformal-certified reasoning graphs."""
