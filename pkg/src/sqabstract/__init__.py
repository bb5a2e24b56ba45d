"""Superquadric abstraction of signed distance fields."""
