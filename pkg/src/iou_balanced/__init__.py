"""IoU-balanced classification and localization losses, with analysis tools and a toy detection benchmark."""

__version__ = "0.1.0"
