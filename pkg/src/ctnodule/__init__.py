"""Lung nodule detection and classification on CT volumes: frozen ViT
features plus lightweight trained heads and classical classifiers."""

__version__ = "0.1.0"
