"""Blocking probabilities of a two-service flexi-grid optical link."""
