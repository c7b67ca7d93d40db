"""Pseudo labels for semi-supervised 3D detection: view/checkpoint ensembling,
box voting, box-wise contrastive losses and a calibrated detector simulator."""

__version__ = "0.1.0"
