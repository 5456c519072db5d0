"""Self-ensembling contrastive semi-supervised segmentation at desk scale."""

__version__ = "0.1.0"
