"""Multi-level and global/local contrastive pretraining at desk scale."""

__version__ = "0.1.0"
