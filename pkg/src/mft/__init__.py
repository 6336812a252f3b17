"""Multi-modal fused-transformer action unit detection at desk scale."""

__version__ = "0.1.0"
