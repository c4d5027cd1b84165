"""Dual graph attention multiple-instance learning with feature disentanglement
for brain age regression, plus a synthetic aging-phantom data generator."""

__version__ = "0.1.0"
