"""Recursive block-diagonal coupling of narrow models into wide ones."""
